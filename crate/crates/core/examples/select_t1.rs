//! Choosing the horizon `T₁` and checking the transform: determinant band,
//! bi-Lipschitz ratios, cone conditions, and the angle `θ₁`.

use std::f64::consts::PI;

use rsde::fields::DriftField;
use rsde::zvonkin::{select_t1, solve_kappa, solve_theta1, SelectOptions};
use rsde::{DomainSpec, Result};

fn main() -> Result<()> {
    let dom = DomainSpec::interval(-1.0, 1.0)?;
    let drift = DriftField::from_preset("sign1d", &[2.0], &dom)?;
    let sel = select_t1(dom, &drift, &SelectOptions { ascending: true, ..Default::default() })?;
    for a in &sel.attempts {
        let cone = a.cone.as_ref().map(|c| c.violations.to_string()).unwrap_or_else(|| "-".into());
        println!("T = {:<10} det in [{:.4}, {:.4}], cone violations {}", a.horizon, a.det.min, a.det.max, cone);
    }
    println!("T1 = {}, theta0 = {:.4}, delta2 = {:.4}", sel.t1, sel.theta0, sel.delta2);

    let z = &sel.transform;
    let det = z.det_check(10_000, (0.45, 2.1), 1)?;
    let bl = z.estimate_bilipschitz(10_000, 2)?;
    let cone = z.verify_cone_conditions(sel.theta0, sel.delta2, 10_000, 3)?;
    println!("det in [{:.4}, {:.4}], M1 = {:.4}, M2 = {:.4}, cone violations {}", det.min, det.max, bl.m1, bl.m2, cone.violations);

    for theta0 in [PI / 6.0, PI / 4.0, PI / 3.0, sel.theta0] {
        let th = solve_theta1(theta0)?;
        let kappa = solve_kappa(theta0, th.theta1)?;
        let m: Vec<String> = th.margins.iter().map(|m| format!("{m:.2e}")).collect();
        println!("theta0 {:.4}: theta1 {:.5}, kappa {:.4}, margins [{}]", theta0, th.theta1, kappa, m.join(", "));
    }
    Ok(())
}
