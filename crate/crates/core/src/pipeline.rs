//! Stage runners shared by the command line, the examples and the tests.
//!
//! A [`Context`] holds one experiment: its config, domain, drift and a ledger
//! of the constants produced or read while it runs. Stages build what they
//! need on demand (the `T₁` selection, the flow constants, the test
//! functions) and cache it, so one context can run several stages. Every
//! quantity is recomputed from the config, so a stage never depends on the
//! order in which earlier commands ran.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HChoice};
use crate::fields::{DriftField, DriftPreset, SpaceTimeVectorField};
use crate::flows::{anchors, fit_flow_constants, verify_flow, Anchor, DirectionField, FitOptions, FlowCheckOptions, FlowCheckReport, FlowConstants, FlowSample};
use crate::geometry::DomainSpec;
use crate::io::{fmt17, write_atomic};
use crate::ledger::{ConstantsLedger, Provenance};
use crate::pde::{holder_estimate, extend_across_boundary, solve_neumann_terminal, HolderFit, ParabolicProblem, SolveReport};
use crate::sde::{ito_residual, krylov_family, par_paths, Batch, Coordinate, ItoTerms, KrylovOptions, KrylovReport, PathSummary, SquaredNorm, TestField};
use crate::stats::MeanEstimate;
use crate::testfns::{
    boundary_derivative_checks, build_h, dupuis_g, fit_eta3, fit_pair_constants, sandwich_check, verify_h, BoundaryFunction, CoverOptions, DupuisG, DupuisReport,
    HReport, PairConstants, PairFunction, PatchConstants, PreimageH, PropertyCheck, TestFnConstants,
};
use crate::uniqueness::{
    gronwall_inputs, lyapunov_trace, pathwise_gap, sign_check_a1, stochastic_gronwall_bound, stopped_len, summarize_traces, GapReport, GronwallPath, GronwallReport,
    Lyapunov, LyapunovTrace, PairExperiment, ResidualSummary, SignReport,
};
use crate::zvonkin::{assess_at, select_t1, solve_kappa, solve_theta1, BiLipschitz, ConeReport, DetReport, SelectOptions, T1Attempt, T1Selection, Theta1, ZvonkinTransform};
use crate::{Error, Result, Vec2};

/// Named pass/fail outcomes of a stage.
pub type Checks = BTreeMap<String, bool>;

/// A stage result that can be written as a report.
pub trait StageReport: Serialize {
    const COMMAND: &'static str;

    /// Checks that decide the exit status.
    fn checks(&self) -> Checks;

    /// Reported outcomes that do not decide the exit status.
    fn diagnostics(&self) -> Checks {
        Checks::new()
    }

    fn pass(&self) -> bool {
        self.checks().values().all(|v| *v)
    }
}

/// What the `T₁` selection found, without the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub t1: f64,
    /// `true` when `T₁` came from the ladder search, `false` for a fixed horizon.
    pub searched: bool,
    pub theta0: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub reference_angle: f64,
    pub reference_radius: f64,
    pub bilip: BiLipschitz,
    pub det: DetReport,
    pub cone: ConeReport,
    pub holder: HolderFit,
    pub theta0_formula: Option<f64>,
    pub attempts: Vec<T1Attempt>,
}

impl SelectionSummary {
    fn of(s: &T1Selection, searched: bool) -> Self {
        SelectionSummary {
            t1: s.t1,
            searched,
            theta0: s.theta0,
            delta0: s.delta0,
            delta1: s.delta1,
            delta2: s.delta2,
            reference_angle: s.reference.0,
            reference_radius: s.reference.1,
            bilip: s.bilip.clone(),
            det: s.det.clone(),
            cone: s.cone.clone(),
            holder: s.holder.clone(),
            theta0_formula: s.theta0_formula.is_finite().then_some(s.theta0_formula),
            attempts: s.attempts.clone(),
        }
    }
}

/// The selected transform and its summary.
#[derive(Debug, Clone)]
pub struct Selection {
    pub transform: Arc<ZvonkinTransform>,
    pub summary: SelectionSummary,
}

/// How `H` was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HKind {
    Cover,
    Preimage,
}

/// `g`, `f_ε` at the configured `ε`, its constants and `H`.
#[derive(Debug, Clone)]
pub struct TestFunctions {
    pub g: DupuisG,
    pub g_report: DupuisReport,
    pub pf: PairFunction,
    pub consts: PairConstants,
    pub h: BoundaryFunction,
    pub h_kind: HKind,
    /// Why the cover was abandoned, when it was.
    pub h_fallback: Option<String>,
    pub eta3: Option<f64>,
}

/// One experiment and its cached intermediate objects.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub domain: DomainSpec,
    pub drift: DriftField,
    /// Constants produced or read by this context.
    pub ledger: ConstantsLedger,
    selection: Option<Selection>,
    theta1: Option<Theta1>,
    flow: Option<FlowConstants>,
    testfns: Option<TestFunctions>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let domain = cfg.domain_spec()?;
        let drift = cfg.drift_field()?;
        Ok(Context { cfg, domain, drift, ledger: ConstantsLedger::new(), selection: None, theta1: None, flow: None, testfns: None })
    }

    /// Seed for the deterministic (non-Monte-Carlo) sampling checks.
    pub fn check_seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(0)
    }

    pub fn select_options(&self) -> SelectOptions {
        let t = &self.cfg.transform;
        SelectOptions {
            resolution: self.cfg.resolution(),
            det_samples: t.select_samples,
            det_band: (t.select_band[0], t.select_band[1]),
            bilip_samples: t.select_samples,
            cone_trials: t.select_samples,
            min_level: t.min_level,
            seed: self.check_seed(),
            mollify_level: self.cfg.mollify_level,
            ascending: true,
        }
    }

    /// The `T₁` selection (or the checks at the fixed horizon).
    pub fn selection(&mut self) -> Result<&Selection> {
        if self.selection.is_none() {
            let opts = self.select_options();
            let (sel, searched) = match self.cfg.horizon.fixed() {
                Some(t) => (assess_at(self.domain, &self.drift, t, &opts)?, false),
                None => (select_t1(self.domain, &self.drift, &opts)?, true),
            };
            sel.write_ledger(&mut self.ledger);
            if !searched {
                self.ledger.set("T1", sel.t1, Provenance::Assumed, "fixed horizon from config, checked like a ladder rung");
            }
            self.ledger.check_invariants()?;
            let summary = SelectionSummary::of(&sel, searched);
            self.selection = Some(Selection { transform: Arc::new(sel.transform), summary });
        }
        Ok(self.selection.as_ref().expect("just set"))
    }

    pub fn transform(&mut self) -> Result<Arc<ZvonkinTransform>> {
        Ok(self.selection()?.transform.clone())
    }

    /// `θ₁` for the selected `θ₀`; also records `κ`.
    pub fn theta1(&mut self) -> Result<Theta1> {
        if let Some(t) = &self.theta1 {
            return Ok(t.clone());
        }
        let theta0 = self.selection()?.summary.theta0;
        let th = solve_theta1(theta0)?;
        let kappa = solve_kappa(theta0, th.theta1)?;
        self.ledger.set("theta1", th.theta1, Provenance::Verified, "largest scan angle with all four margins positive");
        self.ledger.set("kappa", kappa, Provenance::Verified, "annulus constant in (1/2, 1)");
        self.theta1 = Some(th.clone());
        Ok(th)
    }

    pub fn direction(&mut self) -> Result<DirectionField> {
        Ok(DirectionField::new(self.transform()?))
    }

    pub fn flow_constants(&mut self) -> Result<FlowConstants> {
        if let Some(c) = &self.flow {
            return Ok(c.clone());
        }
        self.theta1()?;
        let dir = self.direction()?;
        let f = &self.cfg.flow;
        let opts = FitOptions { anchors: f.fit_anchors, samples: f.fit_samples, seed: self.check_seed() ^ 0xf10, max_halvings: 24 };
        let c = fit_flow_constants(&dir, &self.ledger, &opts)?;
        c.write_ledger(&mut self.ledger);
        self.flow = Some(c.clone());
        Ok(c)
    }

    fn cover_h(&mut self) -> Result<(BoundaryFunction, f64)> {
        self.flow_constants()?;
        let dir = self.direction()?;
        let seed = self.check_seed();
        let c = PatchConstants::from_ledger(&self.ledger)?;
        let eta3 = fit_eta3(&dir, &c, &anchors(&dir, 4, seed ^ 0xa7)?, 16, seed ^ 0xe3)?;
        let c = PatchConstants { eta3, ..c };
        Ok((BoundaryFunction::Cover(build_h(&dir, &c, &CoverOptions::default())?), eta3))
    }

    /// `g`, `f_ε` with fitted `M₆, M₇`, and `H`.
    pub fn test_functions(&mut self) -> Result<TestFunctions> {
        if let Some(t) = &self.testfns {
            return Ok(t.clone());
        }
        let transform = self.transform()?;
        let th = self.theta1()?;
        let seed = self.check_seed();
        let tf = self.cfg.testfn.clone();
        let (g, g_report) = dupuis_g(th.theta0, tf.g_samples, self.domain.dim(), seed ^ 0x9)?;
        let pf = PairFunction::new(transform.clone(), g, tf.eps)?;
        let consts = fit_pair_constants(&pf, tf.fit_samples, seed ^ 0xf17, tf.safety)?;
        let preimage = || BoundaryFunction::Preimage(PreimageH { transform: transform.clone() });
        let want_cover = match tf.h {
            HChoice::Auto => self.domain.dim() == 1,
            HChoice::Cover => true,
            HChoice::Preimage => false,
        };
        let (h, h_kind, h_fallback, eta3) = if want_cover {
            match self.cover_h() {
                Ok((h, eta3)) => (h, HKind::Cover, None, Some(eta3)),
                Err(e @ Error::CoverFailure(_)) if tf.h == HChoice::Auto => (preimage(), HKind::Preimage, Some(e.to_string()), None),
                Err(e) => return Err(e),
            }
        } else {
            (preimage(), HKind::Preimage, None, None)
        };
        let kappa = self.ledger.get("kappa")?;
        TestFnConstants { m4: g.m4, m5: g.m5, m6: consts.m6, m7: consts.m7, kappa, eta3 }.write_ledger(&mut self.ledger);
        let t = TestFunctions { g, g_report, pf, consts, h, h_kind, h_fallback, eta3 };
        self.testfns = Some(t.clone());
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// pde-solve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    /// The closed form compared against.
    pub reference: String,
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeStage {
    pub horizon: f64,
    pub solve: SolveReport,
    pub residual: f64,
    pub alpha0: f64,
    #[serde(rename = "M0")]
    pub m0: f64,
    pub holder: HolderFit,
    /// Present for drifts with a closed-form solution.
    pub exact: Option<ExactSolution>,
}

impl StageReport for PdeStage {
    const COMMAND: &'static str = "pde-solve";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("holder_fit_finite".into(), self.m0.is_finite() && self.alpha0 > 0.0);
        if let Some(e) = &self.exact {
            c.insert("exact_solution".into(), e.max_error <= e.tolerance);
        }
        c
    }
}

/// Solves the backward system at the configured horizon (`T₁` when auto).
pub fn run_pde(ctx: &mut Context) -> Result<(PdeStage, SpaceTimeVectorField)> {
    let horizon = match ctx.cfg.horizon.fixed() {
        Some(t) => t,
        None => ctx.selection()?.summary.t1,
    };
    let mut p = ParabolicProblem::new(ctx.domain, ctx.drift.clone(), horizon, ctx.cfg.resolution());
    p.mollify_level = ctx.cfg.mollify_level;
    let sol = solve_neumann_terminal(&p)?;
    let exact = match ctx.drift.as_preset() {
        Some(DriftPreset::Zero) if ctx.cfg.mollify_level.is_none() => {
            Some(ExactSolution { reference: "u = x".into(), max_error: sol.max_displacement_error(|_| Vec2::zeros()), tolerance: 1e-10 })
        }
        Some(DriftPreset::Constant { c }) if ctx.cfg.mollify_level.is_none() => {
            let c = Vec2::new(c[0], if ctx.domain.dim() == 2 { c[1] } else { 0.0 });
            Some(ExactSolution {
                reference: "u = x + (T - t)c".into(),
                max_error: sol.max_displacement_error(|t| c * (horizon - t)),
                tolerance: 1e-6,
            })
        }
        _ => None,
    };
    let field = sol.field;
    let holder = holder_estimate(&extend_across_boundary(field.clone(), ctx.domain), 2048)?;
    ctx.ledger.set("M0", holder.m0, Provenance::Fitted, "time Hölder constant of u and ∇u");
    ctx.ledger.set("alpha0", holder.alpha0, Provenance::Fitted, "time Hölder exponent");
    let stage = PdeStage { horizon, residual: sol.report.max_relative_residual, solve: sol.report, alpha0: holder.alpha0, m0: holder.m0, holder, exact };
    Ok((stage, field))
}

// ---------------------------------------------------------------------------
// transform-verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStage {
    pub det_range: [f64; 2],
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub cone_violations: usize,
    pub kappa: f64,
    pub det: DetReport,
    pub bilip: BiLipschitz,
    pub cone: ConeReport,
    pub theta1_margins: [f64; 4],
    /// `θ₁` re-solved at `π/6, π/4, π/3`.
    pub theta1_table: Vec<Theta1>,
    pub selection: SelectionSummary,
}

/// Largest tolerated `M₂/M₁`.
pub const BILIP_RATIO_MAX: f64 = 10.0;

fn theta1_ok(t: &Theta1) -> bool {
    t.theta1 > 0.0 && t.margins.iter().all(|m| *m > 0.0)
}

impl StageReport for TransformStage {
    const COMMAND: &'static str = "transform-verify";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("det_band".into(), self.det.violations == 0);
        c.insert("bilipschitz".into(), self.m1 > 0.0 && self.m2 / self.m1 < BILIP_RATIO_MAX);
        c.insert("cone_conditions".into(), self.cone_violations == 0);
        c.insert("theta1".into(), self.theta1 > 0.0 && self.theta1_margins.iter().all(|m| *m > 0.0));
        c.insert("theta1_table".into(), self.theta1_table.iter().all(theta1_ok));
        c
    }
}

/// Selects `T₁` and re-verifies the transform at full sample counts.
pub fn run_transform(ctx: &mut Context) -> Result<TransformStage> {
    let t = ctx.cfg.transform.clone();
    let seed = ctx.check_seed();
    let z = ctx.transform()?;
    let summary = ctx.selection()?.summary.clone();
    let th = ctx.theta1()?;
    let kappa = ctx.ledger.get("kappa")?;
    let det = z.det_check(t.det_samples, (t.det_band[0], t.det_band[1]), seed ^ 0x5d37)?;
    let bilip = z.estimate_bilipschitz(t.bilip_samples, seed ^ 0x5b11)?;
    let cone = z.verify_cone_conditions(summary.theta0, summary.delta2, t.cone_trials, seed ^ 0x5c0e)?;
    let theta1_table = [PI / 6.0, PI / 4.0, PI / 3.0].iter().map(|&a| solve_theta1(a)).collect::<Result<Vec<_>>>()?;
    Ok(TransformStage {
        det_range: [det.min, det.max],
        m1: bilip.m1,
        m2: bilip.m2,
        t1: summary.t1,
        theta0: summary.theta0,
        theta1: th.theta1,
        cone_violations: cone.violations,
        kappa,
        det,
        bilip,
        cone,
        theta1_margins: th.margins,
        theta1_table,
        selection: summary,
    })
}

// ---------------------------------------------------------------------------
// flow

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStage {
    pub constants: FlowConstants,
    pub theta1: f64,
    pub anchor: Option<Anchor>,
    pub check: FlowCheckReport,
}

impl StageReport for FlowStage {
    const COMMAND: &'static str = "flow";

    fn checks(&self) -> Checks {
        let c = &self.check;
        let mut m = Checks::new();
        m.insert("accepted_samples".into(), c.accepted > 0);
        m.insert("psi_vs_fd".into(), c.psi_max_rel_err < c.psi_tol);
        m.insert("hitting_defect".into(), c.max_defect <= c.defect_tol);
        m.insert("gradient_vs_fd".into(), c.grad_max_rel_err < c.grad_tol);
        m.insert("transversality".into(), c.transversality.pass);
        m
    }
}

/// Anchor through `z0` at `t0`: `z0` is pulled back, snapped to `∂D` and
/// pushed forward again, so any point near `u(t0, ∂D)` will do.
pub fn anchor_at(ctx: &mut Context, t0: f64, z0: Vec2) -> Result<Anchor> {
    let z = ctx.transform()?;
    if !(0.0..=z.horizon()).contains(&t0) {
        return Err(Error::InvalidParameter(format!("t0 = {t0} lies outside [0, {}]", z.horizon())));
    }
    let x = z.invert(t0, &z0).unwrap_or(z0);
    let xb = ctx.domain.nearest_boundary_point(&x)?;
    Ok(Anchor { t0, z0: z.u(t0, &xb)? })
}

pub fn run_flow(ctx: &mut Context, anchor: Option<Anchor>) -> Result<(FlowStage, Vec<FlowSample>)> {
    let c = ctx.flow_constants()?;
    let theta1 = ctx.theta1()?.theta1;
    let dir = ctx.direction()?;
    let f = &ctx.cfg.flow;
    let opts = FlowCheckOptions { samples: f.samples, seed: ctx.check_seed() ^ 0xf1c, fd_step: f.fd_step, anchor };
    let (samples, check) = verify_flow(&dir, &c, theta1, &opts)?;
    Ok((FlowStage { constants: c, theta1, anchor, check }, samples))
}

pub const FLOW_CSV_HEADER: [&str; 12] = ["t", "x0", "x1", "r", "psi_rel_err", "grad_rel_err", "hit", "t0", "gamma", "defect", "transversality", "dt_gamma"];

pub fn flow_csv_rows(samples: &[FlowSample]) -> Vec<Vec<String>> {
    samples
        .iter()
        .map(|s| {
            let (hit, t0, g, d, tr, dtg) = match &s.hit {
                Some(h) => ("1", h.t0, h.gamma, h.defect, h.transversality, h.dt_gamma),
                None => ("0", f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            vec![
                fmt17(s.t),
                fmt17(s.x.x),
                fmt17(s.x.y),
                fmt17(s.r),
                fmt17(s.psi_rel_err),
                fmt17(s.grad_rel_err),
                hit.into(),
                fmt17(t0),
                fmt17(g),
                fmt17(d),
                fmt17(tr),
                fmt17(dtg),
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// testfn-verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFnStage {
    pub eps: f64,
    pub dupuis: DupuisReport,
    pub pair: PairConstants,
    pub lambda: f64,
    pub sandwich: Vec<PropertyCheck>,
    pub boundary: Vec<PropertyCheck>,
    pub h_kind: HKind,
    pub h_fallback: Option<String>,
    pub eta3: Option<f64>,
    pub h: HReport,
}

impl StageReport for TestFnStage {
    const COMMAND: &'static str = "testfn-verify";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("dupuis_g".into(), self.dupuis.pass());
        c.insert("f_eps_sandwich".into(), self.sandwich.iter().all(PropertyCheck::pass));
        c.insert("f_eps_boundary".into(), self.boundary.iter().all(PropertyCheck::pass));
        c.insert("h_transversal".into(), self.h.pass());
        c
    }
}

pub fn run_testfn(ctx: &mut Context) -> Result<TestFnStage> {
    let t = ctx.test_functions()?;
    let dir = ctx.direction()?;
    let s = &ctx.cfg.testfn;
    let seed = ctx.check_seed();
    let sandwich = sandwich_check(&t.pf, &t.consts, s.pair_samples, seed ^ 0x5a)?;
    let boundary = boundary_derivative_checks(&t.pf, &t.consts, s.pair_samples, seed ^ 0xbd)?;
    // Held out: a seed the cover calibration never saw.
    let h = verify_h(&t.h, &dir, s.h_samples, seed ^ 0x4e1d)?;
    Ok(TestFnStage {
        eps: s.eps,
        dupuis: t.g_report,
        lambda: t.consts.lambda(),
        pair: t.consts,
        sandwich: sandwich.to_vec(),
        boundary: boundary.to_vec(),
        h_kind: t.h_kind,
        h_fallback: t.h_fallback,
        eta3: t.eta3,
        h,
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoRow {
    pub field: String,
    pub residual: MeanEstimate,
    pub within_3_sigma: bool,
    pub increment: MeanEstimate,
    pub boundary: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateStage {
    pub scheme: String,
    pub drift: String,
    pub paths: usize,
    pub seed: u64,
    pub horizon: f64,
    pub dt: f64,
    pub x0: Vec2,
    pub local_time: MeanEstimate,
    pub reflections: MeanEstimate,
    /// Largest distance of a recorded state outside `D̄`.
    pub max_slack: f64,
    pub ito: Vec<ItoRow>,
}

/// States may sit this far outside `D̄` (projection round-off).
pub const CLOSURE_TOL: f64 = 1e-12;

impl StageReport for SimulateStage {
    const COMMAND: &'static str = "simulate";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("closure".into(), self.max_slack <= CLOSURE_TOL);
        for r in &self.ito {
            c.insert(format!("ito_residual[{}]", r.field), r.within_3_sigma);
        }
        c
    }
}

/// Per-path output of `simulate`.
#[derive(Debug, Clone)]
pub struct SimulatedPaths {
    pub summaries: Vec<PathSummary>,
    pub times: Vec<f64>,
    /// Every recorded state, when trajectories were requested.
    pub states: Option<Vec<Vec<Vec2>>>,
}

fn test_fields(dim: usize) -> Vec<(String, Box<dyn TestField + Send + Sync>)> {
    let mut v: Vec<(String, Box<dyn TestField + Send + Sync>)> = (0..dim).map(|i| (format!("x{i}"), Box::new(Coordinate(i)) as _)).collect();
    v.push(("|x|^2".into(), Box::new(SquaredNorm { dim })));
    v
}

pub fn run_simulate(ctx: &mut Context, seed: u64) -> Result<(SimulateStage, SimulatedPaths)> {
    let s = ctx.cfg.simulate.clone();
    let batch = Batch {
        scheme: s.scheme.scheme(),
        drift: ctx.drift.clone(),
        domain: ctx.domain,
        x0: ctx.cfg.point("simulate.x0", &s.x0)?,
        horizon: s.horizon,
        base_dt: s.dt,
        level: 0,
        seed,
    };
    let fields = test_fields(ctx.domain.dim());
    let dom = ctx.domain;
    let keep = s.trajectories;
    let rows = batch.map(s.paths, |i, p| {
        let terms = fields.iter().map(|(_, f)| ito_residual(f.as_ref(), p, &dom)).collect::<Result<Vec<ItoTerms>>>()?;
        let states = keep.then(|| p.states.clone());
        Ok((PathSummary::of(i, p), terms, states, if i == 0 { p.times.clone() } else { Vec::new() }))
    })?;
    let col = |f: &dyn Fn(&(PathSummary, Vec<ItoTerms>, Option<Vec<Vec2>>, Vec<f64>)) -> f64| MeanEstimate::from_samples(&rows.iter().map(f).collect::<Vec<_>>());
    let ito = fields
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let residual = col(&|r| r.1[k].residual);
            ItoRow { field: name.clone(), within_3_sigma: residual.within(0.0, 3.0), residual, increment: col(&|r| r.1[k].increment), boundary: col(&|r| r.1[k].boundary) }
        })
        .collect();
    let stage = SimulateStage {
        scheme: batch.scheme.tag(),
        drift: ctx.drift.tag(),
        paths: s.paths,
        seed,
        horizon: s.horizon,
        dt: s.dt,
        x0: batch.x0,
        local_time: col(&|r| r.0.local_time),
        reflections: col(&|r| r.0.reflections as f64),
        max_slack: rows.iter().map(|r| r.0.slack).fold(0.0, f64::max),
        ito,
    };
    let times = rows.first().map(|r| r.3.clone()).unwrap_or_default();
    let mut summaries = Vec::with_capacity(rows.len());
    let mut states = keep.then(Vec::new);
    for (sm, _, st, _) in rows {
        summaries.push(sm);
        if let (Some(all), Some(st)) = (states.as_mut(), st) {
            all.push(st);
        }
    }
    Ok((stage, SimulatedPaths { summaries, times, states }))
}

pub const PATHS_CSV_HEADER: [&str; 6] = ["path", "x0", "x1", "local_time", "reflections", "slack"];

pub fn path_csv_rows(summaries: &[PathSummary]) -> Vec<Vec<String>> {
    summaries
        .iter()
        .map(|s| vec![s.index.to_string(), fmt17(s.terminal.x), fmt17(s.terminal.y), fmt17(s.local_time), s.reflections.to_string(), fmt17(s.slack)])
        .collect()
}

/// Magic of the trajectory file.
pub const TRAJECTORY_MAGIC: &[u8; 8] = b"RSDETRJ1";

/// Layout, little endian: magic, `u64` paths, `u64` points per path, `u64`
/// dimension, the time grid (`points` × `f64`), then per path per point
/// `dim` coordinates as `f64`.
pub fn write_trajectories(path: &Path, times: &[f64], states: &[Vec<Vec2>], dim: usize) -> Result<()> {
    let mut b = Vec::with_capacity(32 + 8 * times.len() * (1 + dim * states.len()));
    b.extend_from_slice(TRAJECTORY_MAGIC);
    for n in [states.len(), times.len(), dim] {
        b.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for t in times {
        b.extend_from_slice(&t.to_le_bytes());
    }
    for p in states {
        if p.len() != times.len() {
            return Err(Error::InvalidParameter("ragged trajectories".into()));
        }
        for x in p {
            for i in 0..dim {
                b.extend_from_slice(&x[i].to_le_bytes());
            }
        }
    }
    write_atomic(path, &b)
}

// ---------------------------------------------------------------------------
// krylov

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrylovStage {
    pub drift: String,
    pub seed: u64,
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub x0: Vec2,
    #[serde(rename = "M8")]
    pub m8: f64,
    pub table: KrylovReport,
}

impl StageReport for KrylovStage {
    const COMMAND: &'static str = "krylov";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("m8_finite".into(), self.m8.is_finite());
        c.insert("m8_stable".into(), self.table.stable());
        c
    }
}

pub fn run_krylov(ctx: &mut Context, seed: u64) -> Result<KrylovStage> {
    let k = ctx.cfg.krylov.clone();
    let batch = Batch {
        scheme: ctx.cfg.simulate.scheme.scheme(),
        drift: ctx.drift.clone(),
        domain: ctx.domain,
        x0: ctx.cfg.point("simulate.x0", &ctx.cfg.simulate.x0)?,
        horizon: k.horizon,
        base_dt: k.dt,
        level: k.level,
        seed,
    };
    let table = krylov_family(&batch, &KrylovOptions { widths: k.widths.clone(), paths: k.paths, panels: k.panels, tolerance: k.tolerance })?;
    let m8 = table.fitted_m8();
    ctx.ledger.set("M8", m8, Provenance::Fitted, "max occupation ratio over f = 1 and the slab family");
    Ok(KrylovStage { drift: ctx.drift.tag(), seed, paths: k.paths, horizon: k.horizon, dt: k.dt / f64::from(1u32 << k.level), x0: batch.x0, m8, table })
}

// ---------------------------------------------------------------------------
// uniqueness

/// Traces and sign checks at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRung {
    pub eps: f64,
    pub sign: SignReport,
    pub ablation: SignReport,
    /// Residuals at the coarsest and finest steps of the ladder.
    pub coarse: ResidualSummary,
    pub fine: ResidualSummary,
    pub gronwall: GronwallReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessStage {
    pub drift: String,
    pub seed: u64,
    pub pairs: usize,
    #[serde(rename = "T1")]
    pub t1: f64,
    pub tau_r: Option<f64>,
    #[serde(rename = "M6")]
    pub m6: f64,
    #[serde(rename = "M7")]
    pub m7: f64,
    pub lambda: f64,
    pub h_kind: HKind,
    pub trace_starts: [Vec2; 2],
    pub gap: GapReport,
    pub rungs: Vec<EpsRung>,
}

impl StageReport for UniquenessStage {
    const COMMAND: &'static str = "uniqueness";

    fn checks(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("a1_sign".into(), self.rungs.iter().all(|r| r.sign.pass()));
        c.insert("gap_monotone".into(), self.gap.monotone);
        c.insert("gronwall".into(), self.rungs.iter().all(|r| r.gronwall.pass));
        c
    }

    fn diagnostics(&self) -> Checks {
        let mut c = Checks::new();
        c.insert("ablation_has_violations".into(), self.rungs.iter().any(|r| !r.ablation.pass()));
        c.insert("gap_halved".into(), self.gap.halved());
        c
    }
}

fn traces_with_gronwall(exp: &PairExperiment, ly: &Lyapunov<'_>, m7: f64, n: usize, level: u32) -> Result<(Vec<LyapunovTrace>, Vec<GronwallPath>)> {
    let rows = par_paths(n, |i| {
        let (a, b) = exp.legs(i, level)?;
        let tr = lyapunov_trace(ly, &a, &b, m7)?;
        let mut g = gronwall_inputs(&tr, &a, &exp.drift);
        let k = stopped_len(&a, &exp.drift, exp.tau_r);
        for v in [&mut g.xi, &mut g.eta, &mut g.a, &mut g.m] {
            v.truncate(k);
        }
        Ok((tr, g))
    })?;
    Ok(rows.into_iter().unzip())
}

fn traces_only(exp: &PairExperiment, ly: &Lyapunov<'_>, m7: f64, n: usize, level: u32) -> Result<Vec<LyapunovTrace>> {
    par_paths(n, |i| {
        let (a, b) = exp.legs(i, level)?;
        lyapunov_trace(ly, &a, &b, m7)
    })
}

/// Gap ladder at horizon `T₁`, then per `ε` the Lyapunov traces at the
/// coarsest and finest steps, the `A¹` sign check at `λ = M₆/M₇` and at
/// `λ = 0`, and the stochastic Gronwall bound.
pub fn run_uniqueness(ctx: &mut Context, seed: u64) -> Result<UniquenessStage> {
    let u = ctx.cfg.uniqueness.clone();
    let t1 = ctx.selection()?.summary.t1;
    let tf = ctx.test_functions()?;
    let transform = ctx.transform()?;
    let (base_dt, levels) = ctx.cfg.dt_levels()?;
    let gap_exp = PairExperiment {
        scheme_a: u.scheme_a.scheme(),
        scheme_b: u.scheme_b.scheme(),
        drift: ctx.drift.clone(),
        domain: ctx.domain,
        x0: ctx.cfg.point("uniqueness.x0", &u.x0)?,
        x0_b: None,
        horizon: t1,
        base_dt,
        levels: levels.clone(),
        seed,
        tau_r: u.tau_r,
    };
    let gap = pathwise_gap(&gap_exp, u.pairs)?;
    let (pa, pb) = ctx.cfg.trace_points()?;
    // Both legs run the same scheme: the decomposition is an identity for one
    // process pair, not a comparison of schemes.
    let trace_exp = PairExperiment { scheme_b: gap_exp.scheme_a, x0: pa, x0_b: Some(pb), seed: seed ^ 0x7ace, ..gap_exp.clone() };
    let coarse = *levels.iter().min().expect("nonempty ladder");
    let fine = *levels.iter().max().expect("nonempty ladder");
    let dt_of = |l: u32| base_dt / f64::from(1u32 << l);
    let (m6, m7) = (tf.consts.m6, tf.consts.m7);
    let lambda = tf.consts.lambda();
    let mut rungs = Vec::with_capacity(u.eps_ladder.len());
    for &eps in &u.eps_ladder {
        let pf = PairFunction::new(transform.clone(), tf.g, eps)?;
        let ly = Lyapunov { pf: &pf, h: &tf.h, lambda, drift: &ctx.drift, fd_step: u.fd_step };
        let zero = Lyapunov { lambda: 0.0, ..ly };
        let coarse_tr = traces_only(&trace_exp, &ly, m7, u.pairs, coarse)?;
        let (fine_tr, gpaths) = traces_with_gronwall(&trace_exp, &ly, m7, u.pairs, fine)?;
        let ablation = sign_check_a1(&traces_only(&trace_exp, &zero, m7, u.pairs, fine)?);
        rungs.push(EpsRung {
            eps,
            sign: sign_check_a1(&fine_tr),
            ablation,
            coarse: summarize_traces(&coarse_tr, dt_of(coarse), eps),
            fine: summarize_traces(&fine_tr, dt_of(fine), eps),
            gronwall: stochastic_gronwall_bound(&gpaths, u.p, u.q)?,
        });
    }
    Ok(UniquenessStage {
        drift: ctx.drift.tag(),
        seed,
        pairs: u.pairs,
        t1,
        tau_r: u.tau_r,
        m6,
        m7,
        lambda,
        h_kind: tf.h_kind,
        trace_starts: [pa, pb],
        gap,
        rungs,
    })
}

pub const GAP_CSV_HEADER: [&str; 7] = ["dt", "eps", "level", "mean", "stderr", "ci_lo", "ci_hi"];

/// One row per `(dt, ε)`; the gap itself does not depend on `ε`, so each rung
/// repeats across the `ε` column.
pub fn gap_csv_rows(stage: &UniquenessStage) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in &stage.gap.rungs {
        for e in &stage.rungs {
            rows.push(vec![fmt17(r.dt), fmt17(e.eps), r.level.to_string(), fmt17(r.gap.mean), fmt17(r.gap.stderr), fmt17(r.ci_lo), fmt17(r.ci_hi)]);
        }
    }
    rows
}
