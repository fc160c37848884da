//! The Dupuis-type `g`, the pair function `f_ε` with fitted `M₆, M₇`, and the
//! boundary function `H`.

use rsde::config::ExperimentConfig;
use rsde::pipeline::{run_testfn, Context};
use rsde::Result;

const CONFIG: &str = r#"
domain = "disk"
domain_params = [1.0]
drift = "zero"
seed = 2

[testfn]
g_samples = 20000
pair_samples = 2000
fit_samples = 2000
"#;

fn main() -> Result<()> {
    let mut ctx = Context::new(ExperimentConfig::from_toml(CONFIG)?)?;
    let s = run_testfn(&mut ctx)?;
    println!("g at theta0 = {:.4}: M4 = {:.4}, M5 = {:.4}", s.dupuis.theta0, s.dupuis.m4, s.dupuis.m5);
    for p in s.dupuis.properties.iter().chain(&s.sandwich).chain(&s.boundary) {
        println!("  {:<34} {:>6} samples, {} violations, worst margin {:+.3e}", p.name, p.samples, p.violations, p.worst_margin);
    }
    println!("f_eps at eps = {}: M6 = {:.4} ({}), M7 = {:.4}, lambda = {:.3}", s.eps, s.pair.m6, s.pair.m6_source, s.pair.m7, s.lambda);
    println!("H ({:?}): min grad H . gamma = {:.6} on {} held-out points", s.h_kind, s.h.min_product, s.h.samples);
    Ok(())
}
