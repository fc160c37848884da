//! Drift presets, their mollifications and space-time Lebesgue norms.

use rsde::fields::{mollify, norm_lp_spacetime, DriftField, MollifierKernel, SpaceTimeRegion};
use rsde::{DomainSpec, Result, Vec2};

fn main() -> Result<()> {
    let dom = DomainSpec::disk(1.0)?;
    let presets: [(&str, &[f64]); 4] = [("constant", &[0.5, -0.25]), ("sign1d", &[2.0]), ("checkerboard2d", &[1.0, 4.0]), ("radial_jump", &[1.5, 0.5])];
    let x = Vec2::new(0.01, 0.3);
    for (name, params) in presets {
        let b = DriftField::from_preset(name, params, &dom)?;
        let b4 = mollify(&b, MollifierKernel::new(4), Some(dom))?;
        let l3 = norm_lp_spacetime(|t, y| b.eval(t, y).norm(), 3.0, &SpaceTimeRegion::new(1.0, dom), 32);
        let (v, m) = (b.eval(0.5, &x), b4.eval(0.5, &x));
        println!("{:<15} |b|_inf {:.3}  |b|_L3 {:.4}  b(x) ({:+.3}, {:+.3})  b_4(x) ({:+.3}, {:+.3})", b.tag(), b.bound(), l3, v.x, v.y, m.x, m.y);
    }
    Ok(())
}
