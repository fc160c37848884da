//! Euler schemes for the reflected equation, Brownian paths with bridge
//! refinement, the occupation (Krylov) check and the Itô residual.

use crate::error::{Error, Result};
use crate::fields::{norm_lp_spacetime, norm_lp_static, DriftField, SpaceTimeRegion};
use crate::geometry::DomainSpec;
use crate::stats::MeanEstimate;
use crate::zvonkin::ZvonkinTransform;
use crate::Vec2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Brownian paths

/// Brownian increments on a dyadic grid.
///
/// Level `ℓ` has step `base_dt / 2^ℓ`. The noise for path `index` at level
/// `ℓ` comes from its own ChaCha stream, so any `(seed, index, level)` can be
/// regenerated independently and refinement never perturbs coarser levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub seed: u64,
    pub index: u64,
    pub horizon: f64,
    pub base_dt: f64,
    pub dim: usize,
    pub level: u32,
    pub increments: Vec<Vec2>,
}

fn stream_rng(seed: u64, index: u64, level: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | level as u64);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec2 {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = if dim == 2 { StandardNormal.sample(rng) } else { 0.0 };
    Vec2::new(a, b)
}

impl BrownianPath {
    pub fn new(seed: u64, index: u64, horizon: f64, base_dt: f64, dim: usize) -> Result<Self> {
        if !(horizon > 0.0 && base_dt > 0.0) || !(1..=2).contains(&dim) {
            return Err(Error::InvalidParameter(format!("Brownian path: T = {horizon}, dt = {base_dt}, d = {dim}")));
        }
        let n = (horizon / base_dt).round();
        if (n * base_dt - horizon).abs() > 1e-9 * horizon || n < 1.0 {
            return Err(Error::InvalidParameter(format!("T = {horizon} is not a multiple of dt = {base_dt}")));
        }
        if index >= 1 << 55 {
            return Err(Error::InvalidParameter(format!("path index {index} too large")));
        }
        let mut rng = stream_rng(seed, index, 0);
        let s = base_dt.sqrt();
        let increments = (0..n as usize).map(|_| normal_vec(&mut rng, dim) * s).collect();
        Ok(BrownianPath { seed, index, horizon, base_dt, dim, level: 0, increments })
    }

    pub fn dt(&self) -> f64 {
        self.base_dt / f64::powi(2.0, self.level as i32)
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// Halves the step by Brownian-bridge midpoints; pairs of fine increments
    /// sum to the coarse ones.
    pub fn refined(&self) -> Self {
        let level = self.level + 1;
        let mut rng = stream_rng(self.seed, self.index, level);
        let half = 0.5 * self.dt().sqrt();
        let mut increments = Vec::with_capacity(2 * self.steps());
        for dw in &self.increments {
            let first = dw * 0.5 + normal_vec(&mut rng, self.dim) * half;
            increments.push(first);
            increments.push(dw - first);
        }
        BrownianPath { level, increments, ..self.clone() }
    }

    /// The path refined up to `level` (no-op when already there).
    pub fn at_level(&self, level: u32) -> Self {
        let mut p = self.clone();
        while p.level < level {
            p = p.refined();
        }
        p
    }

    /// `W` at the grid times.
    pub fn cumulative(&self) -> Vec<Vec2> {
        let mut w = Vec2::zeros();
        let mut out = vec![w];
        for dw in &self.increments {
            w += dw;
            out.push(w);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Schemes and paths

/// A reflected Euler scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// Free Euler step then nearest-point projection onto `D̄`, with
    /// `substeps` bridge-refined steps per recorded step.
    Projection { substeps: u32 },
    /// Push `κ·dt·(π(X) − X)` towards `D̄` before the free step; `kappa`
    /// defaults to `1/dt`.
    Penalization { kappa: Option<f64> },
}

impl Scheme {
    pub fn projection() -> Self {
        Scheme::Projection { substeps: 1 }
    }

    pub fn penalization() -> Self {
        Scheme::Penalization { kappa: None }
    }

    pub fn tag(&self) -> String {
        match self {
            Scheme::Projection { substeps: 1 } => "projection".into(),
            Scheme::Projection { substeps } => format!("projection/{substeps}"),
            Scheme::Penalization { kappa: None } => "penalization".into(),
            Scheme::Penalization { kappa: Some(k) } => format!("penalization(k={k})"),
        }
    }

    fn refinement(&self) -> Result<u32> {
        match *self {
            Scheme::Projection { substeps } if substeps.is_power_of_two() => Ok(substeps.trailing_zeros()),
            Scheme::Projection { substeps } => Err(Error::InvalidParameter(format!("substeps = {substeps} must be a power of two"))),
            Scheme::Penalization { .. } => Ok(0),
        }
    }
}

/// Whether the push of a step comes after the free move (projection) or
/// before it (penalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PushOrder {
    AfterMove,
    BeforeMove,
}

/// A discrete solution `(X, L, |L|)`.
///
/// `mid[k]` is the intermediate point of step `k`: the free proposal `X*` for
/// projection-type schemes, the pushed point for penalization. `drift_dt[k]`
/// is the drift displacement actually applied and `push[k]` the increment of
/// `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectedPath {
    pub scheme: String,
    pub order: PushOrder,
    pub times: Vec<f64>,
    pub states: Vec<Vec2>,
    pub mid: Vec<Vec2>,
    pub drift_dt: Vec<Vec2>,
    pub push: Vec<Vec2>,
    pub local_time: Vec<f64>,
    pub reflections: usize,
    /// Largest distance of a recorded state outside `D̄`.
    pub slack: f64,
    /// Scheme steps per recorded step; pushes of inner steps happen off grid.
    pub substeps: u32,
}

impl ReflectedPath {
    fn start(scheme: String, order: PushOrder, x0: Vec2, capacity: usize) -> Self {
        let mut p = ReflectedPath {
            scheme,
            order,
            times: Vec::with_capacity(capacity + 1),
            states: Vec::with_capacity(capacity + 1),
            mid: Vec::with_capacity(capacity),
            drift_dt: Vec::with_capacity(capacity),
            push: Vec::with_capacity(capacity),
            local_time: Vec::with_capacity(capacity + 1),
            reflections: 0,
            slack: 0.0,
            substeps: 1,
        };
        p.times.push(0.0);
        p.states.push(x0);
        p.local_time.push(0.0);
        p
    }

    pub fn steps(&self) -> usize {
        self.mid.len()
    }

    pub fn terminal(&self) -> Vec2 {
        *self.states.last().expect("nonempty path")
    }

    pub fn total_local_time(&self) -> f64 {
        *self.local_time.last().expect("nonempty path")
    }

    /// Largest angle between a nonzero push and the inward normal at the
    /// nearest boundary point of the pushed-from point.
    pub fn max_push_angle(&self, dom: &DomainSpec) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.steps() {
            let dl = self.push[k];
            if dl.norm() == 0.0 {
                continue;
            }
            let at = match self.order {
                PushOrder::AfterMove => self.states[k + 1],
                PushOrder::BeforeMove => self.mid[k],
            };
            let n = dom.boundary_normal(&dom.nearest_boundary_point(&at)?);
            let c = (dl.dot(&n) / dl.norm()).clamp(-1.0, 1.0);
            worst = worst.max(c.acos());
        }
        Ok(worst)
    }
}

/// Optional limits applied while simulating.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepGuard {
    /// Reject any projection whose length exceeds this radius.
    pub max_push: Option<f64>,
}

fn project_closed(dom: &DomainSpec, x: &Vec2) -> Result<Vec2> {
    if dom.contains_closed(x) {
        Ok(*x)
    } else {
        dom.nearest_boundary_point(x)
    }
}

fn check_push(guard: &StepGuard, len: f64) -> Result<()> {
    match guard.max_push {
        Some(radius) if len > radius => Err(Error::StepTooLarge { length: len, radius }),
        _ => Ok(()),
    }
}

/// Simulates the reflected equation from `x0` over `(0, horizon)` on `path`.
pub fn simulate_reflected(scheme: &Scheme, drift: &DriftField, dom: &DomainSpec, x0: &Vec2, horizon: f64, path: &BrownianPath) -> Result<ReflectedPath> {
    simulate_guarded(scheme, drift, dom, x0, horizon, path, &StepGuard::default())
}

/// [`simulate_reflected`] with a [`StepGuard`].
pub fn simulate_guarded(
    scheme: &Scheme,
    drift: &DriftField,
    dom: &DomainSpec,
    x0: &Vec2,
    horizon: f64,
    path: &BrownianPath,
    guard: &StepGuard,
) -> Result<ReflectedPath> {
    if !dom.contains_closed(x0) {
        return Err(Error::InvalidParameter(format!("x0 = ({}, {}) is outside the closed domain", x0.x, x0.y)));
    }
    if horizon > path.horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} exceeds the path horizon {}", path.horizon)));
    }
    let fine = path.at_level(path.level + scheme.refinement()?);
    let sub = 1usize << (fine.level - path.level);
    let dt = fine.dt();
    let n = ((horizon / path.dt()).round() as usize).min(path.steps());
    let mut out = ReflectedPath::start(scheme.tag(), PushOrder::AfterMove, *x0, n);
    out.substeps = sub as u32;
    let mut x = *x0;
    let mut lt = 0.0;
    match *scheme {
        Scheme::Projection { .. } => {
            for k in 0..n {
                let (mut drift_k, mut push_k) = (Vec2::zeros(), Vec2::zeros());
                let mut xstar = x;
                for j in 0..sub {
                    let t = (k * sub + j) as f64 * dt;
                    let bd = drift.eval(t, &x) * dt;
                    xstar = x + bd + fine.increments[k * sub + j];
                    drift_k += bd;
                    let xp = project_closed(dom, &xstar)?;
                    let dl = xp - xstar;
                    if dl.norm() > 0.0 {
                        check_push(guard, dl.norm())?;
                        out.reflections += 1;
                        lt += dl.norm();
                        push_k += dl;
                    }
                    x = xp;
                }
                // With substeps the recorded intermediate point is the one
                // that makes X_{k+1} = X_k + Σ b dt + ΔW + ΔL hold.
                if sub > 1 {
                    xstar = x - push_k;
                }
                out.times.push((k + 1) as f64 * path.dt());
                out.states.push(x);
                out.mid.push(xstar);
                out.drift_dt.push(drift_k);
                out.push.push(push_k);
                out.local_time.push(lt);
            }
        }
        Scheme::Penalization { kappa } => {
            out.order = PushOrder::BeforeMove;
            let kdt = kappa.map(|k| k * dt).unwrap_or(1.0);
            for k in 0..n {
                let t = k as f64 * dt;
                let p = project_closed(dom, &x)?;
                let dl = (p - x) * kdt;
                if dl.norm() > 0.0 {
                    out.reflections += 1;
                    lt += dl.norm();
                }
                let xm = x + dl;
                let bd = drift.eval(t, &p) * dt;
                x = xm + bd + fine.increments[k];
                out.slack = out.slack.max(dom.distance_to_domain(&x)?);
                out.times.push((k + 1) as f64 * dt);
                out.states.push(x);
                out.mid.push(xm);
                out.drift_dt.push(bd);
                out.push.push(dl);
                out.local_time.push(lt);
            }
        }
    }
    Ok(out)
}

/// Simulates `Y = u(t, X)` with diffusion `∇u(t, X)` and maps back through
/// `u⁻¹`; reflection is carried out on the preimage so that the pushed image
/// moves along `∇u·n`, the reflecting direction of the moving domain.
pub fn simulate_transformed(z: &ZvonkinTransform, x0: &Vec2, horizon: f64, path: &BrownianPath) -> Result<ReflectedPath> {
    let dom = *z.domain();
    if horizon > z.horizon() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} exceeds T1 = {}", z.horizon())));
    }
    if !dom.contains_closed(x0) {
        return Err(Error::InvalidParameter(format!("x0 = ({}, {}) is outside the closed domain", x0.x, x0.y)));
    }
    let dt = path.dt();
    let n = ((horizon / dt).round() as usize).min(path.steps());
    let mut out = ReflectedPath::start("transformed".into(), PushOrder::AfterMove, *x0, n);
    let mut x = *x0;
    let mut y = z.u(0.0, &x)?;
    let mut lt = 0.0;
    for k in 0..n {
        let t = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        let dw = path.increments[k];
        let ystar = y + z.jacobian(t, &x)? * dw;
        let xstar = match z.invert_raw(t1, &ystar) {
            Ok(v) => v,
            Err(_) => {
                let (u1, j1) = z.u_with_grad(t1, &x)?;
                let ji = j1.try_inverse().ok_or_else(|| Error::InvalidParameter("singular Du".into()))?;
                x + ji * (ystar - u1)
            }
        };
        let xp = project_closed(&dom, &xstar)?;
        let dl = xp - xstar;
        if dl.norm() > 0.0 {
            out.reflections += 1;
            lt += dl.norm();
        }
        y = if dl.norm() > 0.0 { z.u(t1, &xp)? } else { ystar };
        x = xp;
        out.times.push(t1);
        out.states.push(x);
        out.mid.push(xstar);
        out.drift_dt.push(xstar - out.states[k] - dw);
        out.push.push(dl);
        out.local_time.push(lt);
    }
    Ok(out)
}

/// Runs `f(i)` for `i < n` in parallel, keeping index order.
pub fn par_paths<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Per-path summary written by the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub index: usize,
    pub terminal: Vec2,
    pub local_time: f64,
    pub reflections: usize,
    pub slack: f64,
}

impl PathSummary {
    pub fn of(index: usize, p: &ReflectedPath) -> Self {
        PathSummary { index, terminal: p.terminal(), local_time: p.total_local_time(), reflections: p.reflections, slack: p.slack }
    }
}

/// A batch of paths sharing scheme, drift, start point and grid.
#[derive(Debug, Clone)]
pub struct Batch {
    pub scheme: Scheme,
    pub drift: DriftField,
    pub domain: DomainSpec,
    pub x0: Vec2,
    pub horizon: f64,
    pub base_dt: f64,
    pub level: u32,
    pub seed: u64,
}

impl Batch {
    pub fn path(&self, i: usize) -> Result<BrownianPath> {
        Ok(BrownianPath::new(self.seed, i as u64, self.horizon, self.base_dt, self.domain.dim())?.at_level(self.level))
    }

    pub fn simulate(&self, i: usize) -> Result<ReflectedPath> {
        simulate_reflected(&self.scheme, &self.drift, &self.domain, &self.x0, self.horizon, &self.path(i)?)
    }

    /// Simulates `n` paths and keeps only `f` of each.
    pub fn map<T: Send, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        F: Fn(usize, &ReflectedPath) -> Result<T> + Sync + Send,
    {
        par_paths(n, |i| f(i, &self.simulate(i)?))
    }

    pub fn summaries(&self, n: usize) -> Result<Vec<PathSummary>> {
        self.map(n, |i, p| Ok(PathSummary::of(i, p)))
    }
}

/// `E max_k |X^{dt}_k − X^{dt/2}_{2k}|` for successive levels of a batch,
/// over common noise; entry `j` compares levels `j` and `j + 1`.
pub fn strong_refinement_errors(batch: &Batch, levels: u32, paths: usize) -> Result<Vec<MeanEstimate>> {
    let rows = par_paths(paths, |i| {
        let base = BrownianPath::new(batch.seed, i as u64, batch.horizon, batch.base_dt, batch.domain.dim())?;
        let mut prev: Option<ReflectedPath> = None;
        let mut errs = Vec::new();
        for l in 0..=levels {
            let p = simulate_reflected(&batch.scheme, &batch.drift, &batch.domain, &batch.x0, batch.horizon, &base.at_level(l))?;
            if let Some(c) = prev {
                let e = c.states.iter().enumerate().map(|(k, xc)| (xc - p.states[2 * k]).norm()).fold(0.0, f64::max);
                errs.push(e);
            }
            prev = Some(p);
        }
        Ok(errs)
    })?;
    Ok((0..levels as usize).map(|j| MeanEstimate::from_samples(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).collect())
}

// ---------------------------------------------------------------------------
// Itô residual

/// A scalar field `F(t, x)` with the derivatives the Itô formula needs.
pub trait TestField: Sync {
    fn value(&self, t: f64, x: &Vec2) -> f64;
    fn grad(&self, t: f64, x: &Vec2) -> Vec2;
    fn laplacian(&self, t: f64, x: &Vec2) -> f64;
    fn dt(&self, _t: f64, _x: &Vec2) -> f64 {
        0.0
    }
    fn name(&self) -> String;
}

/// `F(x) = x_i`.
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

/// `F(x) = |x|²`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredNorm {
    pub dim: usize,
}

/// `F ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl TestField for Coordinate {
    fn value(&self, _t: f64, x: &Vec2) -> f64 {
        x[self.0]
    }
    fn grad(&self, _t: f64, _x: &Vec2) -> Vec2 {
        let mut g = Vec2::zeros();
        g[self.0] = 1.0;
        g
    }
    fn laplacian(&self, _t: f64, _x: &Vec2) -> f64 {
        0.0
    }
    fn name(&self) -> String {
        format!("x_{}", self.0 + 1)
    }
}

impl TestField for SquaredNorm {
    fn value(&self, _t: f64, x: &Vec2) -> f64 {
        x.norm_squared()
    }
    fn grad(&self, _t: f64, x: &Vec2) -> Vec2 {
        x * 2.0
    }
    fn laplacian(&self, _t: f64, _x: &Vec2) -> f64 {
        2.0 * self.dim as f64
    }
    fn name(&self) -> String {
        "|x|^2".into()
    }
}

impl TestField for Constant {
    fn value(&self, _t: f64, _x: &Vec2) -> f64 {
        self.0
    }
    fn grad(&self, _t: f64, _x: &Vec2) -> Vec2 {
        Vec2::zeros()
    }
    fn laplacian(&self, _t: f64, _x: &Vec2) -> f64 {
        0.0
    }
    fn name(&self) -> String {
        "constant".into()
    }
}

/// Terms of the discrete Itô decomposition along one path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ItoTerms {
    pub increment: f64,
    pub martingale: f64,
    pub drift: f64,
    pub second_order: f64,
    /// Boundary integral with the gradient taken at the chord midpoint of
    /// each push.
    pub boundary: f64,
    /// `Σ ∇F(X⁺)·n(X⁺) Δ|L|`, the boundary term evaluated on `∂D`.
    pub boundary_normal: f64,
    pub residual: f64,
}

/// `F(T, X_T) − F(0, X_0)` minus the martingale, drift, `½ΔF dt` and boundary
/// sums. Free moves use the left point for the martingale and second-order
/// terms and the chord midpoint for the drift.
pub fn ito_residual<F: TestField + ?Sized>(f: &F, path: &ReflectedPath, dom: &DomainSpec) -> Result<ItoTerms> {
    let mut r = ItoTerms::default();
    for k in 0..path.steps() {
        let t = path.times[k];
        let dt = path.times[k + 1] - t;
        let (a, b, c, d) = match path.order {
            PushOrder::AfterMove => (path.states[k], path.mid[k], path.mid[k], path.states[k + 1]),
            PushOrder::BeforeMove => (path.mid[k], path.states[k + 1], path.states[k], path.mid[k]),
        };
        let bd = path.drift_dt[k];
        let dw = b - a - bd;
        r.martingale += f.grad(t, &a).dot(&dw);
        r.drift += f.grad(t, &((a + b) * 0.5)).dot(&bd) + f.dt(t, &a) * dt;
        r.second_order += 0.5 * f.laplacian(t, &a) * dt;
        let dl = path.push[k];
        if dl.norm() > 0.0 {
            r.boundary += f.grad(t, &((c + d) * 0.5)).dot(&dl);
            let on = dom.nearest_boundary_point(&d)?;
            r.boundary_normal += f.grad(t, &on).dot(&dom.boundary_normal(&on)) * dl.norm();
        }
    }
    let n = path.steps();
    r.increment = f.value(path.times[n], &path.states[n]) - f.value(path.times[0], &path.states[0]);
    r.residual = r.increment - r.martingale - r.drift - r.second_order - r.boundary;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Krylov check

/// One row of the occupation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrylovRow {
    pub label: String,
    pub width: Option<f64>,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs_norm: f64,
    pub ratio: f64,
}

/// `Σ_k |f(t_k, X_k)| dt` along a path.
pub fn occupation<F: Fn(f64, &Vec2) -> f64>(path: &ReflectedPath, f: &F) -> f64 {
    (0..path.steps()).map(|k| f(path.times[k], &path.states[k]).abs() * (path.times[k + 1] - path.times[k])).sum()
}

fn krylov_row(label: String, width: Option<f64>, occ: &[f64], rhs: f64) -> KrylovRow {
    let m = MeanEstimate::from_samples(occ);
    let ratio = if rhs > 0.0 { m.mean / rhs } else { 0.0 };
    KrylovRow { label, width, lhs: m.mean, lhs_stderr: m.stderr, rhs_norm: rhs, ratio }
}

/// `(E∫|f(t, X_t)| dt, ‖f‖_{L^{d+1}((0,T)×D)}, ratio)` over `paths`.
pub fn krylov_check<F>(paths: &[ReflectedPath], f: F, dom: &DomainSpec, horizon: f64, panels: usize) -> KrylovRow
where
    F: Fn(f64, &Vec2) -> f64,
{
    let occ: Vec<f64> = paths.iter().map(|p| occupation(p, &f)).collect();
    let rhs = norm_lp_spacetime(&f, (dom.dim() + 1) as f64, &SpaceTimeRegion::new(horizon, *dom), panels);
    krylov_row("f".into(), None, &occ, rhs)
}

/// The open slab `{lo < x₁ < hi}`.
///
/// Open slabs never charge `∂D`, where the continuous process spends no time
/// but the projection scheme leaves atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub lo: f64,
    pub hi: f64,
}

impl Slab {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn indicator(&self, x: &Vec2) -> f64 {
        if x.x > self.lo && x.x < self.hi {
            1.0
        } else {
            0.0
        }
    }
}

/// Slabs of width `w` touching either end of the `x₁` extent of `D`,
/// through the centre and three quarters of the way across.
pub fn slab_family(dom: &DomainSpec, w: f64) -> Vec<Slab> {
    let (a, b) = match *dom {
        DomainSpec::Interval { a, b } => (a, b),
        DomainSpec::Disk { radius } => (-radius, radius),
        DomainSpec::Ellipse { a, .. } => (-a, a),
    };
    let at = |c: f64| Slab { lo: c - 0.5 * w, hi: c + 0.5 * w };
    vec![Slab { lo: a, hi: a + w }, at(0.5 * (a + b)), at(a + 0.75 * (b - a)), Slab { lo: b - w, hi: b }]
}

/// Options for [`krylov_family`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrylovOptions {
    pub widths: Vec<f64>,
    pub paths: usize,
    pub panels: usize,
    /// Largest tolerated relative spread of the fitted `M₈` across widths.
    pub tolerance: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions { widths: vec![0.1, 0.05, 0.025], paths: 10_000, panels: 512, tolerance: 0.25 }
    }
}

/// The ratio table and the fitted constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrylovReport {
    pub rows: Vec<KrylovRow>,
    /// `(w, M₈(w))`: max ratio over `f ≡ 1` and every slab of width `≥ w`.
    pub m8: Vec<(f64, f64)>,
    /// `(w, max slab ratio at width w)`.
    pub slab_max: Vec<(f64, f64)>,
    pub variation: f64,
    /// Spread of `slab_max` alone, without `f ≡ 1`.
    pub slab_variation: f64,
    pub tolerance: f64,
}

impl KrylovReport {
    pub fn fitted_m8(&self) -> f64 {
        self.m8.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn stable(&self) -> bool {
        self.m8.iter().all(|r| r.1.is_finite()) && self.variation < self.tolerance
    }
}

fn relative_spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi > 0.0 {
        (hi - lo) / hi
    } else {
        0.0
    }
}

/// Occupation ratios for `f ≡ 1` and the slab family at each width.
pub fn krylov_family(batch: &Batch, opts: &KrylovOptions) -> Result<KrylovReport> {
    let dom = batch.domain;
    let mut fams: Vec<(String, Option<f64>, Slab)> = Vec::new();
    for &w in &opts.widths {
        for s in slab_family(&dom, w) {
            fams.push((format!("slab w={w} at {}", s.lo), Some(w), s));
        }
    }
    let occ = batch.map(opts.paths, |_, p| {
        let mut v = vec![occupation(p, &|_, _| 1.0)];
        v.extend(fams.iter().map(|(_, _, s)| occupation(p, &|_, x: &Vec2| s.indicator(x))));
        Ok(v)
    })?;
    let p = (dom.dim() + 1) as f64;
    let region = SpaceTimeRegion::new(batch.horizon, dom);
    let column = |j: usize| occ.iter().map(|r| r[j]).collect::<Vec<_>>();
    let mut rows = vec![krylov_row("one".into(), None, &column(0), norm_lp_static(|_, _| 1.0, p, &region, opts.panels))];
    for (j, (label, w, s)) in fams.iter().enumerate() {
        let rhs = norm_lp_static(|_, x| s.indicator(x), p, &region, opts.panels);
        rows.push(krylov_row(label.clone(), *w, &column(j + 1), rhs));
    }
    let mut m8 = Vec::new();
    let mut slab_max = Vec::new();
    for &w in &opts.widths {
        let at = rows.iter().filter(|r| r.width == Some(w)).map(|r| r.ratio).fold(0.0, f64::max);
        let upto = rows.iter().filter(|r| r.width.is_none_or(|v| v >= w)).map(|r| r.ratio).fold(0.0, f64::max);
        slab_max.push((w, at));
        m8.push((w, upto));
    }
    let variation = relative_spread(&m8.iter().map(|r| r.1).collect::<Vec<_>>());
    let slab_variation = relative_spread(&slab_max.iter().map(|r| r.1).collect::<Vec<_>>());
    Ok(KrylovReport { rows, m8, slab_max, variation, slab_variation, tolerance: opts.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi_square_uniform;

    fn batch(scheme: Scheme, drift: DriftField, dom: DomainSpec, x0: Vec2, level: u32) -> Batch {
        Batch { scheme, drift, domain: dom, x0, horizon: 1.0, base_dt: 1.0 / 64.0, level, seed: 11 }
    }

    #[test]
    fn refinement_preserves_coarse_increments() {
        let p = BrownianPath::new(3, 5, 1.0, 0.125, 2).unwrap();
        let q = p.refined().refined();
        assert_eq!(q.steps(), 4 * p.steps());
        for k in 0..p.steps() {
            let s: Vec2 = q.increments[4 * k..4 * k + 4].iter().sum();
            assert!((s - p.increments[k]).norm() < 1e-15);
        }
        assert_eq!(BrownianPath::new(3, 5, 1.0, 0.125, 2).unwrap(), p);
        assert_ne!(BrownianPath::new(3, 6, 1.0, 0.125, 2).unwrap().increments, p.increments);
    }

    #[test]
    fn increments_have_unit_variance_per_time() {
        let p = BrownianPath::new(1, 0, 256.0, 1.0 / 64.0, 2).unwrap().refined();
        let n = p.steps() as f64;
        let dt = p.dt();
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for dw in &p.increments {
            m1 += dw.x / n;
            m2 += dw.x * dw.x / n;
            m4 += dw.x.powi(4) / n;
        }
        assert!(m1.abs() < 4.0 * (dt / n).sqrt());
        assert!((m2 / dt - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        assert!((m4 / (dt * dt) - 3.0).abs() < 4.0 * (96.0 / n).sqrt());
    }

    #[test]
    fn projection_keeps_paths_in_closure() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let b = batch(Scheme::projection(), DriftField::constant(Vec2::new(2.0, 0.0), 2), dom, Vec2::new(0.5, 0.0), 2);
        let p = b.simulate(0).unwrap();
        assert!(p.states.iter().all(|x| dom.contains_closed(x) || dom.distance_to_domain(x).unwrap() < 1e-15));
        assert!(p.local_time.windows(2).all(|w| w[1] >= w[0]));
        for k in 0..p.steps() {
            if p.local_time[k + 1] > p.local_time[k] {
                assert!(!dom.contains_closed(&p.mid[k]));
            } else {
                assert_eq!(p.push[k], Vec2::zeros());
            }
        }
        assert!(p.max_push_angle(&dom).unwrap() < 1e-2);
        assert!(p.total_local_time() > 0.0);
    }

    #[test]
    fn outward_drift_reflects() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let b = batch(Scheme::projection(), DriftField::sign1d(2.0, 0.5, 1), dom, Vec2::new(0.5, 0.0), 0);
        let s = b.summaries(200).unwrap();
        let hit = s.iter().filter(|p| p.local_time > 0.0).count();
        assert!(hit >= 199, "{hit}");
    }

    #[test]
    fn symmetric_mean_on_interval() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let b = batch(Scheme::projection(), DriftField::zero(1), dom, Vec2::new(0.5, 0.0), 0);
        let xs: Vec<f64> = b.summaries(20_000).unwrap().iter().map(|s| s.terminal.x).collect();
        assert!(MeanEstimate::from_samples(&xs).within(0.5, 3.0));
    }

    #[test]
    fn occupation_is_uniform_in_the_long_run() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        // 2^20 steps; projection leaves boundary atoms of mass O(√dt), so the
        // step is kept small
        let path = BrownianPath::new(2, 0, 256.0, 1.0 / 4096.0, 1).unwrap();
        let p = simulate_reflected(&Scheme::projection(), &DriftField::zero(1), &dom, &Vec2::new(0.5, 0.0), 256.0, &path).unwrap();
        let mut counts = vec![0u64; 10];
        // half a time unit apart; the slowest Neumann mode decays like e^{-π²t/2}
        for x in p.states.iter().step_by(2048) {
            counts[((x.x * 10.0) as usize).min(9)] += 1;
        }
        let (_, pv) = chi_square_uniform(&counts);
        assert!(pv > 1e-3, "p = {pv}, {counts:?}");
    }

    #[test]
    fn penalization_reports_slack() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let b = batch(Scheme::penalization(), DriftField::sign1d(1.0, 0.5, 1), dom, Vec2::new(0.5, 0.0), 2);
        let p = b.simulate(4).unwrap();
        assert!(p.slack > 0.0 && p.slack < 1.0);
        assert!(p.reflections > 0);
        assert!(p.max_push_angle(&dom).unwrap() < 1e-2);
    }

    #[test]
    fn substeps_need_power_of_two() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let b = batch(Scheme::Projection { substeps: 3 }, DriftField::zero(1), dom, Vec2::new(0.5, 0.0), 0);
        assert!(b.simulate(0).is_err());
        let b2 = Batch { scheme: Scheme::Projection { substeps: 2 }, ..b.clone() };
        let two = b2.simulate(0).unwrap();
        let fine = Batch { scheme: Scheme::projection(), level: 1, ..b };
        let f = fine.simulate(0).unwrap();
        for k in 0..two.states.len() {
            assert!((two.states[k] - f.states[2 * k]).norm() < 1e-14);
        }
    }

    #[test]
    fn step_guard_rejects_long_pushes() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let path = BrownianPath::new(1, 0, 1.0, 0.5, 1).unwrap();
        let r = simulate_guarded(&Scheme::projection(), &DriftField::constant(Vec2::new(10.0, 0.0), 1), &dom, &Vec2::new(0.5, 0.0), 1.0, &path, &StepGuard { max_push: Some(0.25) });
        assert!(matches!(r, Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn ito_residual_exact_cases() {
        let dom = DomainSpec::disk(1.0).unwrap();
        for scheme in [Scheme::projection(), Scheme::penalization()] {
            let b = batch(scheme, DriftField::sign1d(2.0, 0.0, 2), dom, Vec2::new(0.3, 0.1), 1);
            let p = b.simulate(1).unwrap();
            for i in 0..2 {
                assert!(ito_residual(&Coordinate(i), &p, &dom).unwrap().residual.abs() < 1e-12);
            }
            assert_eq!(ito_residual(&Constant(2.5), &p, &dom).unwrap().residual, 0.0);
        }
    }

    #[test]
    fn squared_norm_residual_has_zero_mean() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let b = batch(Scheme::projection(), DriftField::zero(2), dom, Vec2::new(0.5, 0.0), 2);
        let terms = b.map(2000, |_, p| ito_residual(&SquaredNorm { dim: 2 }, p, &dom)).unwrap();
        let res: Vec<f64> = terms.iter().map(|t| t.residual).collect();
        assert!(MeanEstimate::from_samples(&res).within(0.0, 3.0));
        assert!(terms.iter().all(|t| t.boundary_normal <= 0.0));
        assert!(terms.iter().any(|t| t.boundary_normal < 0.0));
    }

    #[test]
    fn krylov_constant_and_zero() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let b = batch(Scheme::projection(), DriftField::zero(1), dom, Vec2::new(0.5, 0.0), 0);
        let paths: Vec<ReflectedPath> = (0..20).map(|i| b.simulate(i).unwrap()).collect();
        let one = krylov_check(&paths, |_, _| 1.0, &dom, 1.0, 16);
        assert_eq!(one.lhs, 1.0);
        assert!((one.ratio - 1.0).abs() < 1e-12);
        let zero = krylov_check(&paths, |_, _| 0.0, &dom, 1.0, 16);
        assert_eq!((zero.lhs, zero.rhs_norm, zero.ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn slab_norms_match_closed_form() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let region = SpaceTimeRegion::new(1.0, dom);
        let s = Slab { lo: -0.05, hi: 0.05 };
        let q = norm_lp_static(|_, x| s.indicator(x), 3.0, &region, 256);
        // area of the strip |x₁| < 0.05 in the unit disk
        let a = 2.0 * (0.05 * (1.0f64 - 0.0025).sqrt() + 0.05f64.asin());
        assert!((q / a.cbrt() - 1.0).abs() < 1e-2, "{q} {}", a.cbrt());
    }

    #[test]
    fn transformed_scheme_is_projection_for_zero_drift() {
        use crate::pde::Resolution;
        use crate::zvonkin::{build_transform, SelectOptions};
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 256.0, 1.0 / 32.0), ..SelectOptions::default() };
        let z = build_transform(dom, &DriftField::zero(1), 0.25, &opts).unwrap();
        let path = BrownianPath::new(5, 0, 0.25, 1.0 / 64.0, 1).unwrap().at_level(2);
        let a = simulate_transformed(&z, &Vec2::new(0.9, 0.0), 0.25, &path).unwrap();
        let b = simulate_reflected(&Scheme::projection(), &DriftField::zero(1), &dom, &Vec2::new(0.9, 0.0), 0.25, &path).unwrap();
        let gap = a.states.iter().zip(&b.states).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(gap <= 2.0 / 32.0, "{gap}");
        assert!((z.u(0.25, &a.terminal()).unwrap() - a.terminal()).norm() < 1e-12);
    }
}
