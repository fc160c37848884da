//! Every stage of the command line, in process, from one config.

use rsde::config::ExperimentConfig;
use rsde::pipeline::{run_flow, run_krylov, run_pde, run_simulate, run_testfn, run_transform, run_uniqueness, Context, StageReport};
use rsde::Result;

const CONFIG: &str = r#"
domain = "interval"
domain_params = [-1.0, 1.0]
drift = "sign1d"
drift_params = [2.0]
seed = 1

[simulate]
paths = 2000

[krylov]
paths = 1000

[uniqueness]
pairs = 200
"#;

fn show<R: StageReport>(r: &R) {
    println!("{}: {}", R::COMMAND, if r.pass() { "pass" } else { "FAIL" });
    for (k, v) in r.checks().iter().chain(&r.diagnostics()) {
        println!("  {k:<26} {v}");
    }
}

fn main() -> Result<()> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let seed = cfg.require_seed(None)?;
    let mut ctx = Context::new(cfg)?;
    show(&run_transform(&mut ctx)?);
    show(&run_pde(&mut ctx)?.0);
    show(&run_flow(&mut ctx, None)?.0);
    show(&run_testfn(&mut ctx)?);
    show(&run_simulate(&mut ctx, seed)?.0);
    show(&run_krylov(&mut ctx, seed)?);
    show(&run_uniqueness(&mut ctx, seed)?);
    println!("ledger:");
    for (k, e) in &ctx.ledger.entries {
        println!("  {k:<8} {:<14.6e} {:?}", e.value, e.provenance);
    }
    Ok(())
}
