//! Occupation-time ratios `E∫|f(X)| dt / ‖f‖_{L^{d+1}}` for slab indicators of
//! shrinking width, and the fitted constant `M₈`.

use rsde::fields::DriftField;
use rsde::sde::{krylov_family, Batch, KrylovOptions, Scheme};
use rsde::{DomainSpec, Result, Vec2};

fn main() -> Result<()> {
    let dom = DomainSpec::interval(-1.0, 1.0)?;
    let batch = Batch {
        scheme: Scheme::projection(),
        drift: DriftField::from_preset("sign1d", &[2.0], &dom)?,
        domain: dom,
        x0: Vec2::zeros(),
        horizon: 1.0,
        base_dt: 1.0 / 64.0,
        level: 4,
        seed: 8,
    };
    let rep = krylov_family(&batch, &KrylovOptions { paths: 2000, ..Default::default() })?;
    for r in &rep.rows {
        println!("{:<24} lhs {:.4e} ± {:.1e}  norm {:.4e}  ratio {:.4}", r.label, r.lhs, r.lhs_stderr, r.rhs_norm, r.ratio);
    }
    for (w, m) in &rep.m8 {
        println!("M8(w = {w}) = {m:.4}");
    }
    println!("variation {:.3} (tolerance {}), stable: {}", rep.variation, rep.tolerance, rep.stable());
    Ok(())
}
