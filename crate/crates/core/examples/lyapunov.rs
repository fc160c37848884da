//! The decomposition `F_ε(t) = F_ε(0) + M + A¹ + A²` along common-noise pairs:
//! the sign of the boundary part `A¹` with and without the weight `Z`, and
//! the stochastic Gronwall bound.

use rsde::config::ExperimentConfig;
use rsde::pipeline::Context;
use rsde::sde::Scheme;
use rsde::uniqueness::{gronwall_inputs, lyapunov_trace, sign_check_a1, stochastic_gronwall_bound, summarize_traces, Lyapunov, PairExperiment};
use rsde::{Result, Vec2};

const CONFIG: &str = r#"
domain = "interval"
domain_params = [-1.0, 1.0]
drift = "sign1d"
drift_params = [2.0]
seed = 4

[testfn]
g_samples = 20000
fit_samples = 2000
"#;

fn main() -> Result<()> {
    let mut ctx = Context::new(ExperimentConfig::from_toml(CONFIG)?)?;
    let tf = ctx.test_functions()?;
    let t1 = ctx.selection()?.summary.t1;
    println!("T1 = {t1}, M6 = {:.4}, M7 = {:.4}, lambda = {:.3}", tf.consts.m6, tf.consts.m7, tf.consts.lambda());
    let exp = PairExperiment {
        scheme_a: Scheme::projection(),
        scheme_b: Scheme::projection(),
        drift: ctx.drift.clone(),
        domain: ctx.domain,
        x0: Vec2::new(0.8, 0.0),
        x0_b: Some(Vec2::new(0.75, 0.0)),
        horizon: t1,
        base_dt: 1.0 / 1024.0,
        levels: vec![0],
        seed: 9,
        tau_r: None,
    };
    let ly = Lyapunov { pf: &tf.pf, h: &tf.h, lambda: tf.consts.lambda(), drift: &ctx.drift, fd_step: 1e-4 };
    let zero = Lyapunov { lambda: 0.0, ..ly };
    let (mut traces, mut ablation, mut gp) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..200 {
        let (a, b) = exp.legs(i, 0)?;
        let tr = lyapunov_trace(&ly, &a, &b, tf.consts.m7)?;
        gp.push(gronwall_inputs(&tr, &a, &ctx.drift));
        traces.push(tr);
        ablation.push(lyapunov_trace(&zero, &a, &b, tf.consts.m7)?);
    }
    for s in [sign_check_a1(&traces), sign_check_a1(&ablation)] {
        println!("lambda = {:<8.3} {} reflection events, {} with A1 > 0 (worst {:+.2e})", s.lambda, s.events, s.violations, s.worst);
    }
    let r = summarize_traces(&traces, exp.base_dt, tf.pf.eps);
    println!("terminal residual {:+.2e} ± {:.1e}, Z in [{:.2e}, {:.2e}]", r.residual.mean, r.residual.stderr, r.min_z, r.max_z);
    let g = stochastic_gronwall_bound(&gp, 0.5, 0.25)?;
    println!("Gronwall: lhs {:.4e} <= rhs {:.4e}: {}", g.lhs, g.rhs, g.pass);
    Ok(())
}
