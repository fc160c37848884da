//! The `rsde` command line.
//!
//! Every command reads one TOML config, writes its outputs under
//! `<out>/<command>/` and merges the constants it touched into the shared
//! ledger. Each command directory holds `report.json` (checks, config, ledger
//! snapshot and the stage report) and `metadata.json` (wall clock and thread
//! count, kept apart so reports are byte-identical across runs).
//!
//! Exit status: 0 when every check passes, 2 when a check is violated, 1 on
//! errors.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::io::{write_csv_atomic, write_json_atomic};
use crate::ledger::ConstantsLedger;
use crate::pipeline::{
    anchor_at, flow_csv_rows, gap_csv_rows, path_csv_rows, run_flow, run_krylov, run_pde, run_simulate, run_testfn, run_transform, run_uniqueness, write_trajectories,
    Checks, Context, StageReport, FLOW_CSV_HEADER, GAP_CSV_HEADER, PATHS_CSV_HEADER,
};
use crate::{Error, Result, Vec2};

#[derive(Debug, Parser)]
#[command(name = "rsde", version, about = "Zvonkin transform pipeline for reflected SDEs with bounded drift")]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; overrides the config and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonteCarlo {
    #[command(flatten)]
    pub common: Common,
    /// Number of paths (pairs for `uniqueness`).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Seed; required here or in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the backward Neumann system and fit its time regularity.
    PdeSolve(Common),
    /// Select T1 and check the transform: determinant, bi-Lipschitz, cones, theta1.
    TransformVerify(Common),
    /// Check the flow of the reflecting direction and the hitting times.
    Flow {
        #[command(flatten)]
        common: Common,
        /// Anchor time.
        #[arg(long, requires = "z0")]
        t0: Option<f64>,
        /// Anchor point, comma separated; snapped onto the moving boundary.
        #[arg(long, value_delimiter = ',', num_args = 1..=2, requires = "t0")]
        z0: Option<Vec<f64>>,
    },
    /// Check g, f_eps and H.
    TestfnVerify(Common),
    /// Simulate the reflected SDE and check the Itô residual.
    Simulate {
        #[command(flatten)]
        mc: MonteCarlo,
        /// Also write every trajectory.
        #[arg(long)]
        trajectories: bool,
    },
    /// Occupation-time ratios and the fitted M8.
    Krylov(MonteCarlo),
    /// Gap ladder, A1 sign check and the Lyapunov residuals.
    Uniqueness(MonteCarlo),
    /// Aggregate the command reports under an output root.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Commands aggregated by `report`, in order.
pub const COMMANDS: [&str; 7] = ["pde-solve", "transform-verify", "flow", "testfn-verify", "simulate", "krylov", "uniqueness"];

#[derive(Serialize)]
struct Envelope<'a, R> {
    command: &'static str,
    pass: bool,
    checks: Checks,
    diagnostics: Checks,
    config: &'a ExperimentConfig,
    ledger: &'a ConstantsLedger,
    report: &'a R,
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'static str,
    unix_time: f64,
    elapsed_seconds: f64,
    threads: usize,
}

fn load(common: &Common) -> Result<(Context, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir());
    Ok((Context::new(cfg)?, out))
}

fn apply_mc(ctx: &mut Context, mc: &MonteCarlo, set_paths: impl FnOnce(&mut ExperimentConfig, usize)) -> Result<u64> {
    if let Some(n) = mc.paths {
        if n == 0 {
            return Err(Error::config("paths", "must be positive"));
        }
        set_paths(&mut ctx.cfg, n);
    }
    ctx.cfg.require_seed(mc.seed)
}

/// Ledger file: `--out` moves it along with the outputs unless the config
/// names one.
fn ledger_path(ctx: &Context, out: &Path) -> PathBuf {
    ctx.cfg.ledger.clone().unwrap_or_else(|| out.join("ledger.json"))
}

fn finish<R: StageReport>(ctx: &Context, out: &Path, report: &R, started: Instant) -> Result<bool> {
    let dir = out.join(R::COMMAND);
    let env = Envelope { command: R::COMMAND, pass: report.pass(), checks: report.checks(), diagnostics: report.diagnostics(), config: &ctx.cfg, ledger: &ctx.ledger, report };
    write_json_atomic(&dir.join("report.json"), &env)?;
    let lp = ledger_path(ctx, out);
    let mut ledger = if lp.exists() { ConstantsLedger::load(&lp)? } else { ConstantsLedger::new() };
    ledger.merge(&ctx.ledger);
    ledger.save(&lp)?;
    let meta = Metadata {
        command: R::COMMAND,
        version: env!("CARGO_PKG_VERSION"),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    write_json_atomic(&dir.join("metadata.json"), &meta)?;
    for (k, v) in env.checks.iter().chain(&env.diagnostics) {
        eprintln!("{:<28} {}", k, if *v { "ok" } else { "FAIL" });
    }
    Ok(env.pass)
}

#[derive(Serialize)]
struct CommandSummary {
    command: String,
    pass: bool,
    checks: serde_json::Value,
    diagnostics: serde_json::Value,
}

#[derive(Serialize)]
struct Summary {
    pass: bool,
    commands: Vec<CommandSummary>,
    missing: Vec<String>,
}

fn aggregate(out: &Path, started: Instant) -> Result<bool> {
    let mut commands = Vec::new();
    let mut missing = Vec::new();
    for c in COMMANDS {
        let p = out.join(c).join("report.json");
        if !p.exists() {
            missing.push(c.to_string());
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        commands.push(CommandSummary {
            command: c.into(),
            pass: v["pass"].as_bool().unwrap_or(false),
            checks: v["checks"].clone(),
            diagnostics: v["diagnostics"].clone(),
        });
    }
    if commands.is_empty() {
        return Err(Error::InvalidParameter(format!("no command reports under {}", out.display())));
    }
    let pass = commands.iter().all(|c| c.pass);
    for c in &commands {
        eprintln!("{:<28} {}", c.command, if c.pass { "ok" } else { "FAIL" });
    }
    write_json_atomic(&out.join("summary.json"), &Summary { pass, commands, missing })?;
    let meta = Metadata {
        command: "report",
        version: env!("CARGO_PKG_VERSION"),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    write_json_atomic(&out.join("summary.metadata.json"), &meta)?;
    Ok(pass)
}

/// Runs one command; `Ok(true)` when every check passed.
pub fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        // Fails only if a pool exists already, as in repeated in-process runs.
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let started = Instant::now();
    match cli.command {
        Command::PdeSolve(c) => {
            let (mut ctx, out) = load(&c)?;
            let (stage, field) = run_pde(&mut ctx)?;
            field.write_binary(&out.join("pde-solve").join("field.bin"))?;
            finish(&ctx, &out, &stage, started)
        }
        Command::TransformVerify(c) => {
            let (mut ctx, out) = load(&c)?;
            let stage = run_transform(&mut ctx)?;
            finish(&ctx, &out, &stage, started)
        }
        Command::Flow { common, t0, z0 } => {
            let (mut ctx, out) = load(&common)?;
            let anchor = match (t0, z0) {
                (Some(t0), Some(z)) => {
                    let dim = ctx.domain.dim();
                    if z.len() != dim {
                        return Err(Error::config("z0", format!("expected {dim} coordinates, got {}", z.len())));
                    }
                    Some(anchor_at(&mut ctx, t0, Vec2::new(z[0], z.get(1).copied().unwrap_or(0.0)))?)
                }
                _ => None,
            };
            let (stage, samples) = run_flow(&mut ctx, anchor)?;
            write_csv_atomic(&out.join("flow").join("samples.csv"), &FLOW_CSV_HEADER, &flow_csv_rows(&samples))?;
            finish(&ctx, &out, &stage, started)
        }
        Command::TestfnVerify(c) => {
            let (mut ctx, out) = load(&c)?;
            let stage = run_testfn(&mut ctx)?;
            finish(&ctx, &out, &stage, started)
        }
        Command::Simulate { mc, trajectories } => {
            let (mut ctx, out) = load(&mc.common)?;
            let seed = apply_mc(&mut ctx, &mc, |c, n| c.simulate.paths = n)?;
            ctx.cfg.simulate.trajectories |= trajectories;
            let (stage, paths) = run_simulate(&mut ctx, seed)?;
            let dir = out.join("simulate");
            write_csv_atomic(&dir.join("paths.csv"), &PATHS_CSV_HEADER, &path_csv_rows(&paths.summaries))?;
            if let Some(states) = &paths.states {
                write_trajectories(&dir.join("trajectories.bin"), &paths.times, states, ctx.domain.dim())?;
            }
            finish(&ctx, &out, &stage, started)
        }
        Command::Krylov(mc) => {
            let (mut ctx, out) = load(&mc.common)?;
            let seed = apply_mc(&mut ctx, &mc, |c, n| c.krylov.paths = n)?;
            let stage = run_krylov(&mut ctx, seed)?;
            write_json_atomic(&out.join("krylov").join("ratios.json"), &stage.table)?;
            finish(&ctx, &out, &stage, started)
        }
        Command::Uniqueness(mc) => {
            let (mut ctx, out) = load(&mc.common)?;
            let seed = apply_mc(&mut ctx, &mc, |c, n| c.uniqueness.pairs = n)?;
            let stage = run_uniqueness(&mut ctx, seed)?;
            let dir = out.join("uniqueness");
            write_csv_atomic(&dir.join("gap_ladder.csv"), &GAP_CSV_HEADER, &gap_csv_rows(&stage))?;
            let signs: Vec<_> = stage.rungs.iter().map(|r| serde_json::json!({"eps": r.eps, "lambda": r.sign, "lambda_zero": r.ablation})).collect();
            write_json_atomic(&dir.join("a1_sign.json"), &signs)?;
            let residuals: Vec<_> =
                stage.rungs.iter().map(|r| serde_json::json!({"eps": r.eps, "coarse": r.coarse, "fine": r.fine, "gronwall": r.gronwall})).collect();
            write_json_atomic(&dir.join("lyapunov_residual.json"), &residuals)?;
            finish(&ctx, &out, &stage, started)
        }
        Command::Report { config, out } => {
            let out = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c)?.out_dir(),
                (None, None) => return Err(Error::config("out", "pass --out or --config")),
            };
            aggregate(&out, started)
        }
    }
}

/// Parses the arguments, runs, prints errors and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
