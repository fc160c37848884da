//! The backward Neumann system for `u`: exact solutions for zero and constant
//! drift, then a discontinuous drift with its time-Hölder fit.

use rsde::fields::DriftField;
use rsde::pde::{extend_across_boundary, holder_estimate, solve_neumann_terminal, ParabolicProblem, Resolution};
use rsde::{DomainSpec, Result, Vec2};

fn main() -> Result<()> {
    let dom = DomainSpec::disk(1.0)?;
    let res = Resolution::new(1.0 / 1024.0, 1.0 / 128.0);
    let t = 1.0;

    let zero = solve_neumann_terminal(&ParabolicProblem::new(dom, DriftField::zero(2), t, res))?;
    println!("b = 0:        max |u - x|            = {:.3e}", zero.max_displacement_error(|_| Vec2::zeros()));

    let c = Vec2::new(0.5, -0.25);
    let con = solve_neumann_terminal(&ParabolicProblem::new(dom, DriftField::constant(c, 2), t, res))?;
    println!("b = c:        max |u - x - (T - t)c| = {:.3e}", con.max_displacement_error(|s| c * (t - s)));

    let sign = solve_neumann_terminal(&ParabolicProblem::new(dom, DriftField::sign1d(2.0, 0.0, 2), 0.0625, res))?;
    println!("b = 2 sign(x1): {} steps, max relative residual {:.3e}", sign.report.steps, sign.report.max_relative_residual);
    let ext = extend_across_boundary(sign.field, dom);
    let h = holder_estimate(&ext, 2048)?;
    println!("  time Hölder fit: M0 = {:.4}, alpha0 = {:.4}", h.m0, h.alpha0);
    let x = Vec2::new(0.3, 0.2);
    let (u, du) = ext.u_with_grad(0.0, &x)?;
    println!("  u(0, x) = ({:.5}, {:.5}), det Du = {:.5}", u.x, u.y, du.determinant());
    Ok(())
}
