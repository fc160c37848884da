//! The reflecting direction `γ` on the moving boundary, its flow, and
//! hitting times of the tangent hyperplane, checked against differences.

use rsde::config::ExperimentConfig;
use rsde::flows::{hitting_time, HittingOptions};
use rsde::pipeline::{run_flow, Context};
use rsde::Result;

const CONFIG: &str = r#"
domain = "interval"
domain_params = [-1.0, 1.0]
drift = "constant"
drift_params = [0.5]
seed = 5
"#;

fn main() -> Result<()> {
    let mut ctx = Context::new(ExperimentConfig::from_toml(CONFIG)?)?;
    let c = ctx.flow_constants()?;
    println!("rho1 = {:.3e}, delta4 = {:.3e}, eta1 = {:.3e}, delta5 = {:.3e}, eta2 = {:.3e}", c.rho1, c.delta4, c.eta1, c.delta5, c.eta2);

    let dir = ctx.direction()?;
    let z = ctx.transform()?;
    let (t0, xb) = (0.5, ctx.domain.boundary_point(0.75));
    let zb = z.u(t0, &xb)?;
    let g = dir.eval(t0, &zb);
    println!("u(t0, 1) = {:.6}, gamma there = {:+.6}", zb.x, g.x);
    let x = zb - g * (0.5 * c.delta4);
    let hit = hitting_time(&dir, t0, &x, t0, &zb, &HittingOptions::new(c.rho1))?;
    println!("start {:.6}: Gamma = {:.6e}, defect {:.1e}, transversality {:.6}", x.x, hit.gamma, hit.defect, hit.transversality);

    let (stage, samples) = run_flow(&mut ctx, None)?;
    let r = &stage.check;
    println!("{} samples, {} hits: psi err {:.1e}, defect {:.1e}, grad err {:.1e}, min transversality {:.6}", samples.len(), r.accepted, r.psi_max_rel_err, r.max_defect, r.grad_max_rel_err, r.transversality.min_product);
    Ok(())
}
