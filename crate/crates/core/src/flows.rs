//! The reflecting direction `γ(t, y) = n(u⁻¹(t, y))·φ(t, y)`, its flow
//! `∂_r y = γ(t, y)`, the Jacobian flow `ψ`, the time-derivative flow `Λ`
//! and hitting times of hyperplanes.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ledger::{ConstantsLedger, Provenance};
use crate::smooth::cutoff;
use crate::zvonkin::{TimeDependentDomain, ZvonkinTransform};
use crate::{Error, Mat2, Result, Vec2};

/// `γ` with finite-difference derivatives.
#[derive(Debug, Clone)]
pub struct DirectionField {
    pub transform: Arc<ZvonkinTransform>,
    /// Spatial step of the central differences for `D_yγ`.
    pub fd_step: f64,
    /// Time step of the central differences for `∂_tγ`.
    pub fd_step_t: f64,
}

impl DirectionField {
    pub fn new(transform: impl Into<Arc<ZvonkinTransform>>) -> Self {
        DirectionField { transform: transform.into(), fd_step: 1e-5, fd_step_t: 1e-7 }
    }

    pub fn dim(&self) -> usize {
        self.transform.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.transform.horizon()
    }

    /// Cutoff of the preimage distance to `D`: 1 up to `δ₀/4`, 0 beyond `3δ₀/8`.
    fn phi(&self, x: &Vec2) -> f64 {
        let d0 = self.transform.delta0();
        match self.transform.domain().distance_to_domain(x) {
            Ok(d) => cutoff(d, 0.25 * d0, 0.375 * d0),
            Err(_) => 0.0,
        }
    }

    /// `γ(t, y)`; zero where `y` has no preimage.
    pub fn eval(&self, t: f64, y: &Vec2) -> Vec2 {
        match self.transform.invert_raw(t, y) {
            Ok(x) => self.transform.domain().inward_normal_extended(&x) * self.phi(&x),
            Err(_) => Vec2::zeros(),
        }
    }

    /// `J[(j, k)] = ∂_k γ^j` by central differences.
    pub fn grad(&self, t: f64, y: &Vec2) -> Mat2 {
        let h = self.fd_step;
        let mut j = Mat2::zeros();
        for k in 0..self.dim() {
            let mut e = Vec2::zeros();
            e[k] = h;
            j.set_column(k, &((self.eval(t, &(y + e)) - self.eval(t, &(y - e))) / (2.0 * h)));
        }
        j
    }

    /// `∂_tγ(t, y)` by differences, one-sided at the ends of `[0, T₁]`.
    pub fn dt(&self, t: f64, y: &Vec2) -> Vec2 {
        let h = self.fd_step_t;
        let t1 = self.horizon();
        let (a, b) = ((t - h).max(0.0), (t + h).min(t1));
        if b <= a {
            return Vec2::zeros();
        }
        (self.eval(b, y) - self.eval(a, y)) / (b - a)
    }

    /// Samples a point of `u(t, ∂D)` together with its boundary preimage.
    pub fn sample_image_boundary<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<(Vec2, Vec2)> {
        let xb = self.transform.domain().sample_boundary(rng);
        Ok((self.transform.u(t, &xb)?, xb))
    }
}

/// Solution of the flow system at parameter `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec2,
    pub r: f64,
    pub y: Vec2,
    /// `psi[(j, i)] = ∂y^j/∂x_i`.
    pub psi: Mat2,
    /// `∂_t y`.
    pub lambda: Vec2,
    /// Set when the trajectory met `γ = 0` (outside the cutoff support).
    pub frozen: bool,
}

#[derive(Clone, Copy)]
struct Deriv {
    dy: Vec2,
    dpsi: Mat2,
    dlam: Vec2,
    zero: bool,
}

fn rhs(dir: &DirectionField, t: f64, y: &Vec2, psi: &Mat2, lam: &Vec2, with_lambda: bool) -> Deriv {
    let g = dir.eval(t, y);
    let dg = dir.grad(t, y);
    let dlam = if with_lambda { dir.dt(t, y) + dg * lam } else { Vec2::zeros() };
    Deriv { dy: g, dpsi: dg * psi, dlam, zero: g.norm() == 0.0 }
}

/// Integrates the flow system from `r = 0` to `r` with `n` RK4 steps.
pub fn flow_steps(dir: &DirectionField, t: f64, x: &Vec2, r: f64, n: usize, with_lambda: bool) -> FlowState {
    let mut s = FlowState { t, x: *x, r: 0.0, y: *x, psi: Mat2::identity(), lambda: Vec2::zeros(), frozen: false };
    if r == 0.0 {
        return s;
    }
    let n = n.max(1);
    let h = r / n as f64;
    for _ in 0..n {
        let k1 = rhs(dir, t, &s.y, &s.psi, &s.lambda, with_lambda);
        let k2 = rhs(dir, t, &(s.y + k1.dy * (0.5 * h)), &(s.psi + k1.dpsi * (0.5 * h)), &(s.lambda + k1.dlam * (0.5 * h)), with_lambda);
        let k3 = rhs(dir, t, &(s.y + k2.dy * (0.5 * h)), &(s.psi + k2.dpsi * (0.5 * h)), &(s.lambda + k2.dlam * (0.5 * h)), with_lambda);
        let k4 = rhs(dir, t, &(s.y + k3.dy * h), &(s.psi + k3.dpsi * h), &(s.lambda + k3.dlam * h), with_lambda);
        s.y += (k1.dy + k2.dy * 2.0 + k3.dy * 2.0 + k4.dy) * (h / 6.0);
        s.psi += (k1.dpsi + k2.dpsi * 2.0 + k3.dpsi * 2.0 + k4.dpsi) * (h / 6.0);
        s.lambda += (k1.dlam + k2.dlam * 2.0 + k3.dlam * 2.0 + k4.dlam) * (h / 6.0);
        s.frozen |= k1.zero || k4.zero;
    }
    s.r = r;
    s
}

/// `y(t, x, r)`, `ψ` and `Λ` with RK4 steps of at most `step`.
pub fn flow(dir: &DirectionField, t: f64, x: &Vec2, r: f64, step: f64) -> Result<FlowState> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::InvalidParameter(format!("flow step {step} must lie in (0, 1e-3]")));
    }
    let n = (r.abs() / step).ceil() as usize;
    Ok(flow_steps(dir, t, x, r, n, true))
}

/// Hyperplane hitting record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingRecord {
    pub t0: f64,
    pub z: Vec2,
    pub t: f64,
    pub x: Vec2,
    pub gamma: f64,
    pub hit_point: Vec2,
    /// `|(hit_point − z)·γ(t₀, z)|`.
    pub defect: f64,
    /// `γ(t, y(Γ))·γ(t₀, z)`.
    pub transversality: f64,
    pub grad_gamma: Vec2,
    pub dt_gamma: f64,
}

/// Knobs of the hitting-time solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingOptions {
    pub rho1: f64,
    /// RK4 steps over `[0, ρ₁]`; a fixed count keeps `r ↦ y(r)` smooth.
    pub steps: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl HittingOptions {
    pub fn new(rho1: f64) -> Self {
        HittingOptions { rho1, steps: ((rho1 / 1e-3).ceil() as usize).max(16), tol: 1e-12, max_iter: 100 }
    }
}

/// Root `Γ ∈ (−ρ₁, ρ₁)` of `r ↦ (y(t, x, r) − z)·γ(t₀, z)`.
pub fn hitting_time(dir: &DirectionField, t: f64, x: &Vec2, t0: f64, z: &Vec2, opts: &HittingOptions) -> Result<HittingRecord> {
    let a = dir.eval(t0, z);
    let no_root = |detail: String| Error::NoRootInInterval { rho1: opts.rho1, detail };
    if a.norm() < 0.5 {
        return Err(no_root("γ(t₀, z) vanishes".into()));
    }
    let rho1 = opts.rho1;
    let steps_for = |r: f64| ((opts.steps as f64) * r.abs() / rho1).ceil().max(1.0) as usize;
    let f = |r: f64| -> (f64, FlowState) {
        let s = flow_steps(dir, t, x, r, steps_for(r), false);
        ((s.y - z).dot(&a), s)
    };
    let f0 = (x - z).dot(&a);
    let root = if f0.abs() <= opts.tol {
        0.0
    } else {
        // F is increasing, so the sign of F(0) picks the side.
        let edge = if f0 < 0.0 { rho1 } else { -rho1 } * (1.0 - 1e-9);
        let (fe, _) = f(edge);
        if fe.signum() == f0.signum() {
            return Err(no_root(format!("F(0) = {f0:.3e}, F({edge:.3e}) = {fe:.3e}")));
        }
        let (mut lo, mut hi) = if f0 < 0.0 { (0.0, edge) } else { (edge, 0.0) };
        let mut r = 0.5 * (lo + hi);
        let mut done = false;
        for _ in 0..opts.max_iter {
            let (fr, s) = f(r);
            if fr.abs() <= opts.tol {
                done = true;
                break;
            }
            if fr < 0.0 {
                lo = r;
            } else {
                hi = r;
            }
            let slope = dir.eval(t, &s.y).dot(&a);
            let mut next = if slope > 0.0 { r - fr / slope } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if hi - lo < 1e-16 {
                r = next;
                done = true;
                break;
            }
            r = next;
        }
        if !done {
            return Err(no_root("root finder did not converge".into()));
        }
        r
    };
    let s = flow_steps(dir, t, x, root, steps_for(root), true);
    let g_end = dir.eval(t, &s.y);
    let trans = g_end.dot(&a);
    let grad = -(s.psi.transpose() * a) / trans;
    let dtg = -s.lambda.dot(&a) / trans;
    let mut grad_gamma = grad;
    if dir.dim() == 1 {
        grad_gamma.y = 0.0;
    }
    Ok(HittingRecord {
        t0,
        z: *z,
        t,
        x: *x,
        gamma: root,
        hit_point: s.y,
        defect: (s.y - z).dot(&a).abs(),
        transversality: trans,
        grad_gamma,
        dt_gamma: dtg,
    })
}

/// `x ∈ C(z, δ)`: within `δ` of `z` and within `2δ tan θ₁` of the line through
/// `z` along `axis`.
pub fn cone_cz_contains(z: &Vec2, axis: &Vec2, delta: f64, theta1: f64, x: &Vec2) -> bool {
    let v = x - z;
    if v.norm() >= delta {
        return false;
    }
    let a = axis.normalize();
    let perp = v - a * v.dot(&a);
    perp.norm() < 2.0 * delta * theta1.tan()
}

/// An anchor `(t₀, z₀)` with `z₀ ∈ u(t₀, ∂D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub t0: f64,
    pub z0: Vec2,
}

/// Evenly spread anchors over boundary parameter and time.
pub fn anchors(dir: &DirectionField, count: usize, seed: u64) -> Result<Vec<Anchor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = *dir.transform.domain();
    (0..count)
        .map(|k| {
            let t0 = dir.horizon() * rng.random::<f64>();
            let s = if dom.dim() == 1 { if k % 2 == 0 { 0.25 } else { 0.75 } } else { (k as f64 + rng.random::<f64>()) / count as f64 };
            Ok(Anchor { t0, z0: dir.transform.u(t0, &dom.boundary_point(s))? })
        })
        .collect()
}

fn sample_ball<R: Rng + ?Sized>(rng: &mut R, c: &Vec2, radius: f64, dim: usize) -> Vec2 {
    if dim == 1 {
        return Vec2::new(c.x + radius * (2.0 * rng.random::<f64>() - 1.0), 0.0);
    }
    let a = 2.0 * PI * rng.random::<f64>();
    c + Vec2::new(a.cos(), a.sin()) * (radius * rng.random::<f64>().sqrt())
}

fn sample_window<R: Rng + ?Sized>(rng: &mut R, t0: f64, eta: f64, t1: f64) -> f64 {
    let lo = (t0 - eta).max(0.0);
    let hi = (t0 + eta).min(t1);
    lo + (hi - lo) * rng.random::<f64>()
}

/// Transversality sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub samples: usize,
    pub min_product: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Min of `γ(t, y(t, x, Γ))·γ(t₀, z)` over hitting records.
pub fn transversality_check(records: &[HittingRecord], theta1: f64) -> TransversalityReport {
    let min_product = records.iter().map(|r| r.transversality).fold(f64::INFINITY, f64::min);
    let threshold = theta1.cos() - 1e-6;
    TransversalityReport { samples: records.len(), min_product, threshold, pass: records.is_empty() || min_product >= threshold }
}

/// Flow-related constants fitted by shrink-until-pass sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConstants {
    pub rho0: f64,
    pub delta3: f64,
    pub eta0: f64,
    pub rho1: f64,
    pub delta4: f64,
    pub eta1: f64,
    pub delta5: f64,
    pub eta2: f64,
}

impl FlowConstants {
    pub fn write_ledger(&self, ledger: &mut ConstantsLedger) {
        ledger.set("rho0", self.rho0, Provenance::Fitted, "largest power of 1/2 with det psi >= 1/2 on samples");
        ledger.set("delta3", self.delta3, Provenance::Fitted, "direction-coherence radius");
        ledger.set("eta0", self.eta0, Provenance::Fitted, "direction-coherence time window");
        ledger.set("rho1", self.rho1, Provenance::Assumed, "delta3/4 ∧ rho0");
        ledger.set("delta4", self.delta4, Provenance::Fitted, "hitting-time radius");
        ledger.set("eta1", self.eta1, Provenance::Fitted, "hitting-time window");
        ledger.set("delta5", self.delta5, Provenance::Assumed, "delta4 sin(theta0)/16");
        ledger.set("eta2", self.eta2, Provenance::Fitted, "interior-preservation window");
    }
}

/// Sampling effort of [`fit_flow_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub anchors: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { anchors: 6, samples: 12, seed: 7, max_halvings: 24 }
    }
}

/// Largest `ρ = 2^{−k}` with `|det ψ(t, x, ±ρ)| ≥ ½` at points near the moving boundary.
pub fn fit_rho0(dir: &DirectionField, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = 0.5 * dir.transform.delta0();
    let pts: Vec<(f64, Vec2)> = (0..samples)
        .map(|_| {
            let t = dir.horizon() * rng.random::<f64>();
            let (zb, _) = dir.sample_image_boundary(t, &mut rng)?;
            Ok((t, sample_ball(&mut rng, &zb, d1, dir.dim())))
        })
        .collect::<Result<_>>()?;
    let mut rho = 0.5;
    for _ in 0..30 {
        let ok = pts.iter().all(|(t, x)| {
            [rho, -rho].iter().all(|&r| {
                let s = flow_steps(dir, *t, x, r, ((rho / 1e-3).ceil() as usize).clamp(8, 256), false);
                s.psi.determinant().abs() >= 0.5
            })
        });
        if ok {
            return Ok(rho);
        }
        rho *= 0.5;
    }
    Err(Error::NonConvergence("no ρ₀ down to 2^-30".into()))
}

/// Runs the sweeps for `ρ₀, δ₃, η₀, δ₄, η₁, η₂` and sets `ρ₁`, `δ₅`.
pub fn fit_flow_constants(dir: &DirectionField, ledger: &ConstantsLedger, opts: &FitOptions) -> Result<FlowConstants> {
    let theta0 = ledger.get("theta0")?;
    let theta1 = ledger.get("theta1")?;
    let delta2 = ledger.get("delta2")?;
    let m0 = ledger.get("M0")?;
    let alpha0 = ledger.get("alpha0")?;
    let t1 = dir.horizon();
    let dim = dir.dim();
    let cos1 = theta1.cos();
    let rho0 = fit_rho0(dir, opts.samples * 2, opts.seed)?;
    let anchors = anchors(dir, opts.anchors, opts.seed ^ 0xa)?;

    // Direction coherence on B(z₀, δ₃) × window η₀.
    let coherent = |delta: f64, eta: f64, seed: u64| -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        anchors.iter().all(|an| {
            (0..opts.samples).all(|_| {
                let (t, tp) = (sample_window(&mut rng, an.t0, eta, t1), sample_window(&mut rng, an.t0, eta, t1));
                let (x, xp) = (sample_ball(&mut rng, &an.z0, delta, dim), sample_ball(&mut rng, &an.z0, delta, dim));
                let (g, gp) = (dir.eval(t, &x), dir.eval(tp, &xp));
                (g.norm() - 1.0).abs() < 1e-9 && (gp.norm() - 1.0).abs() < 1e-9 && g.dot(&gp) >= cos1
            })
        })
    };
    let mut delta3 = 0.5 * delta2;
    let mut k = 0;
    while !coherent(delta3, 0.0, opts.seed ^ 0x3) {
        delta3 *= 0.5;
        k += 1;
        if k > opts.max_halvings {
            return Err(Error::NonConvergence("δ₃ sweep".into()));
        }
    }
    let mut eta0 = 0.5 * t1;
    k = 0;
    while !coherent(delta3, eta0, opts.seed ^ 0x30) {
        eta0 *= 0.5;
        k += 1;
        if k > opts.max_halvings {
            return Err(Error::NonConvergence("η₀ sweep".into()));
        }
    }
    let rho1 = (0.25 * delta3).min(rho0);
    let hopts = HittingOptions::new(rho1);

    // Unique hitting times for x, z ∈ B(z₀, δ₄) and t in the η₁ window.
    let hits = |delta: f64, eta: f64, seed: u64| -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        anchors.iter().all(|an| {
            (0..opts.samples).all(|_| {
                let t = sample_window(&mut rng, an.t0, eta, t1);
                let x = sample_ball(&mut rng, &an.z0, delta, dim);
                let z = sample_ball(&mut rng, &an.z0, delta, dim);
                matches!(hitting_time(dir, t, &x, an.t0, &z, &hopts), Ok(r) if r.transversality >= cos1 - 1e-6)
            })
        })
    };
    let mut delta4 = 0.49 * delta3;
    let mut eta1 = 0.5 * eta0;
    k = 0;
    while !hits(delta4, eta1, opts.seed ^ 0x4) {
        delta4 *= 0.5;
        eta1 *= 0.5;
        k += 1;
        if k > opts.max_halvings {
            return Err(Error::NonConvergence("δ₄/η₁ sweep".into()));
        }
    }
    let delta5 = delta4 * theta0.sin() / 16.0;
    let cap = if m0 > 0.0 { (delta4 * theta0.sin() / (8.0 * m0)).powf(1.0 / alpha0) } else { f64::INFINITY };
    let mut eta2 = 0.5 * eta1.min(cap);
    let pf = PreservationSetup { theta0, theta1, delta5, rho1 };
    k = 0;
    loop {
        let mut ok = true;
        for (i, an) in anchors.iter().enumerate() {
            for eps in [delta5, 0.25 * delta5] {
                let rep = interior_preservation_check(dir, an, &pf, eta2, eps, opts.samples, opts.seed ^ (0x50 + i as u64))?;
                if rep.violations > 0 {
                    ok = false;
                }
            }
        }
        if ok {
            break;
        }
        eta2 *= 0.5;
        k += 1;
        if k > opts.max_halvings {
            return Err(Error::NonConvergence("η₂ sweep".into()));
        }
    }
    Ok(FlowConstants { rho0, delta3, eta0, rho1, delta4, eta1, delta5, eta2 })
}

/// Constants needed by the interior-preservation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationSetup {
    pub theta0: f64,
    pub theta1: f64,
    pub delta5: f64,
    pub rho1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    /// Samples with `x ∈ C(z, δ₅) ∩ D(t, ε)` and `Γ > 0`.
    pub selected: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub vacuous: bool,
}

/// Along `r ∈ (0, Γᶻ(t, x)]` the flow stays in `D(t, (ε ∧ δ₅/16)·sin(θ₀/2))`.
pub fn interior_preservation_check(
    dir: &DirectionField,
    anchor: &Anchor,
    setup: &PreservationSetup,
    eta2: f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<PreservationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let td = TimeDependentDomain::new(&dir.transform);
    let hopts = HittingOptions::new(setup.rho1);
    let z = flow_steps(dir, anchor.t0, &anchor.z0, 0.5 * setup.delta5, 16, false).y;
    let axis = dir.eval(anchor.t0, &z);
    let level = eps.min(setup.delta5 / 16.0) * (0.5 * setup.theta0).sin();
    let mut rep = PreservationReport { selected: 0, violations: 0, worst_margin: f64::INFINITY, vacuous: false };
    let dim = dir.dim();
    for _ in 0..samples * 8 {
        if rep.selected >= samples {
            break;
        }
        let t = sample_window(&mut rng, anchor.t0, eta2, dir.horizon());
        let x = sample_ball(&mut rng, &z, setup.delta5, dim);
        if !cone_cz_contains(&z, &axis, setup.delta5, setup.theta1, &x) || !td.inner_contains(t, &x, eps)? {
            continue;
        }
        let rec = match hitting_time(dir, t, &x, anchor.t0, &z, &hopts) {
            Ok(r) => r,
            Err(Error::NoRootInInterval { .. }) => continue,
            Err(e) => return Err(e),
        };
        if rec.gamma <= 0.0 {
            continue;
        }
        rep.selected += 1;
        for k in 1..=32 {
            let r = rec.gamma * k as f64 / 32.0;
            let y = flow_steps(dir, t, &x, r, 16, false).y;
            let margin = td.depth(t, &y)? - level;
            rep.worst_margin = rep.worst_margin.min(margin);
            if margin <= 0.0 {
                rep.violations += 1;
                break;
            }
        }
    }
    rep.vacuous = rep.selected == 0;
    Ok(rep)
}

/// `(∫_A f(y(t, x, r)) dx, 2∫_{y(A)} f)` by a midpoint rule on `A`, the second
/// integral pulled back through `|det ψ|`.
pub fn measure_change_bound<F, M>(dir: &DirectionField, t: f64, r: f64, f: F, lo: Vec2, hi: Vec2, member: M, n: usize) -> (f64, f64)
where
    F: Fn(&Vec2) -> f64,
    M: Fn(&Vec2) -> bool,
{
    let dim = dir.dim();
    let ny = if dim == 1 { 1 } else { n };
    let hx = (hi.x - lo.x) / n as f64;
    let hy = if dim == 1 { 1.0 } else { (hi.y - lo.y) / n as f64 };
    let steps = ((r.abs() / 1e-3).ceil() as usize).max(1);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..ny {
            let x = Vec2::new(lo.x + (i as f64 + 0.5) * hx, if dim == 1 { 0.0 } else { lo.y + (j as f64 + 0.5) * hy });
            if !member(&x) {
                continue;
            }
            let s = flow_steps(dir, t, &x, r, steps, false);
            let fy = f(&s.y);
            lhs += fy * hx * hy;
            rhs += fy * s.psi.determinant().abs() * hx * hy;
        }
    }
    (lhs, 2.0 * rhs)
}

/// One sampled point of [`verify_flow`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub t: f64,
    pub x: Vec2,
    pub r: f64,
    /// `|ψ − ψ_fd| / |ψ|` (Frobenius).
    pub psi_rel_err: f64,
    /// Hitting record, when the root finder accepted one.
    pub hit: Option<HittingRecord>,
    /// `|∇Γ − ∇Γ_fd| / |∇Γ|`.
    pub grad_rel_err: f64,
}

/// Aggregates of [`verify_flow`] with the thresholds applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckReport {
    pub samples: usize,
    pub accepted: usize,
    pub psi_max_rel_err: f64,
    pub max_defect: f64,
    pub grad_max_rel_err: f64,
    pub transversality: TransversalityReport,
    pub psi_tol: f64,
    pub defect_tol: f64,
    pub grad_tol: f64,
}

impl FlowCheckReport {
    pub fn pass(&self) -> bool {
        self.accepted > 0
            && self.psi_max_rel_err < self.psi_tol
            && self.max_defect <= self.defect_tol
            && self.grad_max_rel_err < self.grad_tol
            && self.transversality.pass
    }
}

/// Knobs of [`verify_flow`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckOptions {
    pub samples: usize,
    pub seed: u64,
    /// Step of the central differences in `x`.
    pub fd_step: f64,
    /// Fixed anchor `(t₀, z₀)`; `None` draws one per sample.
    pub anchor: Option<Anchor>,
}

fn fd_jacobian<F: Fn(&Vec2) -> Result<Vec2>>(f: F, x: &Vec2, h: f64, dim: usize) -> Result<Mat2> {
    let mut j = Mat2::zeros();
    if dim == 1 {
        j[(1, 1)] = 1.0;
    }
    for i in 0..dim {
        let mut e = Vec2::zeros();
        e[i] = h;
        let mut col = (f(&(x + e))? - f(&(x - e))?) / (2.0 * h);
        if dim == 1 {
            col.y = 0.0;
        }
        for k in 0..dim {
            j[(k, i)] = col[k];
        }
    }
    Ok(j)
}

/// Samples `(t, x)` near the moving boundary as in the hitting-time sweep
/// (`x, z ∈ B(z₀, δ₄)`, `t` within `η₁` of `t₀`) and compares `ψ` and `∇Γ`
/// against central differences; records hitting defects and transversality.
pub fn verify_flow(dir: &DirectionField, c: &FlowConstants, theta1: f64, opts: &FlowCheckOptions) -> Result<(Vec<FlowSample>, FlowCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dim = dir.dim();
    let t1 = dir.horizon();
    let hopts = HittingOptions::new(c.rho1);
    let h = opts.fd_step;
    let mut out = Vec::with_capacity(opts.samples);
    for _ in 0..opts.samples {
        let an = match opts.anchor {
            Some(a) => a,
            None => {
                let t0 = t1 * rng.random::<f64>();
                let (z0, _) = dir.sample_image_boundary(t0, &mut rng)?;
                Anchor { t0, z0 }
            }
        };
        let t = sample_window(&mut rng, an.t0, c.eta1, t1);
        let x = sample_ball(&mut rng, &an.z0, c.delta4, dim);
        let z = sample_ball(&mut rng, &an.z0, c.delta4, dim);
        let r = c.rho1 * (2.0 * rng.random::<f64>() - 1.0);
        let steps = ((c.rho1 / 1e-3).ceil() as usize).max(16);
        let s = flow_steps(dir, t, &x, r, steps, false);
        let fd = fd_jacobian(|p| Ok(flow_steps(dir, t, p, r, steps, false).y), &x, h, dim)?;
        let psi_rel_err = (s.psi - fd).norm() / s.psi.norm();
        let (hit, grad_rel_err) = match hitting_time(dir, t, &x, an.t0, &z, &hopts) {
            Ok(rec) => {
                let mut fdg = Vec2::zeros();
                for i in 0..dim {
                    let mut e = Vec2::zeros();
                    e[i] = h;
                    let gp = hitting_time(dir, t, &(x + e), an.t0, &z, &hopts)?.gamma;
                    let gm = hitting_time(dir, t, &(x - e), an.t0, &z, &hopts)?.gamma;
                    fdg[i] = (gp - gm) / (2.0 * h);
                }
                (Some(rec), (rec.grad_gamma - fdg).norm() / rec.grad_gamma.norm())
            }
            Err(Error::NoRootInInterval { .. }) => (None, 0.0),
            Err(e) => return Err(e),
        };
        out.push(FlowSample { t, x, r, psi_rel_err, hit, grad_rel_err });
    }
    let records: Vec<HittingRecord> = out.iter().filter_map(|s| s.hit).collect();
    let rep = FlowCheckReport {
        samples: out.len(),
        accepted: records.len(),
        psi_max_rel_err: out.iter().map(|s| s.psi_rel_err).fold(0.0, f64::max),
        max_defect: records.iter().map(|r| r.defect).fold(0.0, f64::max),
        grad_max_rel_err: out.iter().map(|s| s.grad_rel_err).fold(0.0, f64::max),
        transversality: transversality_check(&records, theta1),
        psi_tol: 1e-3,
        defect_tol: 1e-9,
        grad_tol: 1e-3,
    };
    Ok((out, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DriftField;
    use crate::pde::Resolution;
    use crate::zvonkin::{build_transform, SelectOptions};
    use crate::DomainSpec;

    fn identity_dir() -> DirectionField {
        let dom = DomainSpec::disk(1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 64.0, 1.0 / 16.0), ..Default::default() };
        DirectionField::new(build_transform(dom, &DriftField::zero(2), 1.0, &opts).unwrap())
    }

    #[test]
    fn radial_flow_is_a_straight_line() {
        let dir = identity_dir();
        let x = Vec2::new(0.9, 0.0);
        let s0 = flow(&dir, 0.5, &x, 0.0, 1e-3).unwrap();
        assert_eq!(s0.y, x);
        assert_eq!(s0.psi, Mat2::identity());
        assert_eq!(s0.lambda, Vec2::zeros());
        let s = flow(&dir, 0.5, &x, 0.1, 1e-3).unwrap();
        assert!((s.y - Vec2::new(0.8, 0.0)).norm() < 1e-9);
        // Analytic Jacobian of x ↦ x(1 − r/|x|): diag(1, 1 − r/|x|).
        let want = Mat2::new(1.0, 0.0, 0.0, 1.0 - 0.1 / 0.9);
        assert!((s.psi - want).norm() < 1e-4, "{}", s.psi);
        assert!(s.lambda.norm() < 1e-6);
    }

    #[test]
    fn semigroup_property() {
        let dir = identity_dir();
        let x = Vec2::new(0.7, 0.6);
        let a = flow(&dir, 0.2, &x, 0.05, 1e-3).unwrap();
        let b = flow(&dir, 0.2, &a.y, -0.08, 1e-3).unwrap();
        let c = flow(&dir, 0.2, &x, -0.03, 1e-3).unwrap();
        assert!((b.y - c.y).norm() < 1e-9);
    }

    #[test]
    fn radial_hitting_time_closed_form() {
        let dir = identity_dir();
        let z = Vec2::new(0.95, 0.0);
        let x = Vec2::new(0.97, 0.0);
        let rec = hitting_time(&dir, 0.3, &x, 0.3, &z, &HittingOptions::new(0.05)).unwrap();
        assert!((rec.gamma - (x.norm() - z.norm())).abs() < 1e-9);
        assert!(rec.defect <= 1e-9);
        let on = hitting_time(&dir, 0.3, &z, 0.3, &z, &HittingOptions::new(0.05)).unwrap();
        assert_eq!(on.gamma, 0.0);
        assert!((on.transversality - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hitting_gradient_matches_differences() {
        let dir = identity_dir();
        let z = Vec2::new(0.95 * 0.6, 0.95 * 0.8);
        let x = Vec2::new(0.58, 0.77);
        let o = HittingOptions::new(0.05);
        let rec = hitting_time(&dir, 0.3, &x, 0.3, &z, &o).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut e = Vec2::zeros();
            e[i] = h;
            let gp = hitting_time(&dir, 0.3, &(x + e), 0.3, &z, &o).unwrap().gamma;
            let gm = hitting_time(&dir, 0.3, &(x - e), 0.3, &z, &o).unwrap().gamma;
            let fd = (gp - gm) / (2.0 * h);
            assert!((fd - rec.grad_gamma[i]).abs() < 1e-3 * rec.grad_gamma.norm(), "{fd} {}", rec.grad_gamma[i]);
        }
    }

    #[test]
    fn verify_flow_on_identity() {
        let dir = identity_dir();
        let c = FlowConstants { rho0: 0.5, delta3: 0.2, eta0: 0.5, rho1: 0.05, delta4: 0.05, eta1: 0.25, delta5: 0.003, eta2: 0.1 };
        let opts = FlowCheckOptions { samples: 12, seed: 3, fd_step: 1e-5, anchor: None };
        let (samples, rep) = verify_flow(&dir, &c, 0.1, &opts).unwrap();
        assert_eq!(samples.len(), 12);
        assert!(rep.accepted > 6, "{rep:?}");
        assert!(rep.pass(), "{rep:?}");
        let again = verify_flow(&dir, &c, 0.1, &opts).unwrap().1;
        assert_eq!(rep, again);
    }

    #[test]
    fn cz_membership() {
        let z = Vec2::new(0.0, 0.0);
        let axis = Vec2::new(1.0, 0.0);
        assert!(cone_cz_contains(&z, &axis, 0.1, 0.02, &z));
        assert!(!cone_cz_contains(&z, &axis, 0.1, 0.02, &Vec2::new(0.0, 0.099)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = Vec2::new(rng.random::<f64>() * 0.3 - 0.15, rng.random::<f64>() * 0.3 - 0.15);
            let direct = x.norm() < 0.1 && x.y.abs() < 0.2 * 0.02f64.tan();
            assert_eq!(direct, cone_cz_contains(&z, &axis, 0.1, 0.02, &x));
        }
    }

    #[test]
    fn measure_change_trivial_and_annulus() {
        let dir = identity_dir();
        let member = |x: &Vec2| x.norm() > 0.8 && x.norm() < 0.95;
        let lo = Vec2::new(-1.0, -1.0);
        let hi = Vec2::new(1.0, 1.0);
        let (l, r) = measure_change_bound(&dir, 0.5, 0.0, |_| 1.0, lo, hi, member, 60);
        assert!((2.0 * l - r).abs() < 1e-12);
        let (l, r) = measure_change_bound(&dir, 0.5, 0.05, |_| 1.0, lo, hi, member, 60);
        assert!(l <= r);
        let (l, r) = measure_change_bound(&dir, 0.5, 0.05, |_| 0.0, lo, hi, member, 10);
        assert_eq!((l, r), (0.0, 0.0));
    }
}
