//! Common-noise pairs, the gap ladder, the Lyapunov decomposition of
//! `F_ε = Z·f_ε` and the sign check of its boundary part.

use crate::error::{Error, Result};
use crate::fields::DriftField;
use crate::geometry::DomainSpec;
use crate::sde::{par_paths, simulate_reflected, BrownianPath, PushOrder, ReflectedPath, Scheme};
use crate::stats::{loglog_order, nonincreasing_within_ci, MeanEstimate};
use crate::testfns::{BoundaryFunction, PairFunction};
use crate::Vec2;
use serde::{Deserialize, Serialize};

/// Two discretizations driven by the same Brownian path.
#[derive(Debug, Clone)]
pub struct PairExperiment {
    pub scheme_a: Scheme,
    pub scheme_b: Scheme,
    pub drift: DriftField,
    pub domain: DomainSpec,
    pub x0: Vec2,
    /// Start of the second leg; `None` means `x0`.
    pub x0_b: Option<Vec2>,
    pub horizon: f64,
    /// Step of the coarsest rung.
    pub base_dt: f64,
    /// Refinement levels of the ladder, `dt = base_dt / 2^ℓ`.
    pub levels: Vec<u32>,
    pub seed: u64,
    /// Level `R` of the stopping time `τ_R = inf{t : C_t ≥ R}` with
    /// `C_t = ∫ (1 + |b(s, X_s)|) ds`; `None` runs to the horizon.
    pub tau_r: Option<f64>,
}

impl PairExperiment {
    pub fn start_b(&self) -> Vec2 {
        self.x0_b.unwrap_or(self.x0)
    }

    /// Both legs of pair `i` at refinement `level`.
    pub fn legs(&self, i: usize, level: u32) -> Result<(ReflectedPath, ReflectedPath)> {
        let path = BrownianPath::new(self.seed, i as u64, self.horizon, self.base_dt, self.domain.dim())?.at_level(level);
        let a = simulate_reflected(&self.scheme_a, &self.drift, &self.domain, &self.x0, self.horizon, &path)?;
        let b = simulate_reflected(&self.scheme_b, &self.drift, &self.domain, &self.start_b(), self.horizon, &path)?;
        Ok((a, b))
    }
}

/// `sup_k |X_k − X̃_k|` over the common grid.
pub fn sup_distance(a: &ReflectedPath, b: &ReflectedPath) -> f64 {
    a.states.iter().zip(&b.states).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Number of grid points `t_k ≤ τ_R`, with `C` accumulated along the first leg.
pub fn stopped_len(a: &ReflectedPath, drift: &DriftField, r: Option<f64>) -> usize {
    let Some(r) = r else { return a.states.len() };
    let mut c = 0.0;
    for k in 1..a.states.len() {
        c += (1.0 + drift.eval(a.times[k - 1], &a.states[k - 1]).norm()) * (a.times[k] - a.times[k - 1]);
        if c >= r {
            return k + 1;
        }
    }
    a.states.len()
}

/// `sup_{t_k ≤ τ_R} |X_k − X̃_k|`.
pub fn stopped_sup_distance(a: &ReflectedPath, b: &ReflectedPath, drift: &DriftField, r: Option<f64>) -> f64 {
    let n = stopped_len(a, drift, r);
    a.states[..n].iter().zip(&b.states[..n]).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// One rung of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRung {
    pub dt: f64,
    pub level: u32,
    pub gap: MeanEstimate,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// `E sup |X − X̃|^{1/4}` per rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub scheme_a: String,
    pub scheme_b: String,
    pub drift: String,
    pub paths: usize,
    pub rungs: Vec<GapRung>,
    /// Fitted exponent of `gap ~ dt^order`, descriptive only.
    pub order: f64,
    pub monotone: bool,
    /// Finest-rung gap over coarsest-rung gap.
    pub finest_over_coarsest: f64,
}

impl GapReport {
    pub fn halved(&self) -> bool {
        self.finest_over_coarsest <= 0.5
    }
}

/// Width multiplier of the reported confidence intervals.
pub const CI_SIGMAS: f64 = 3.0;

/// The gap ladder of `exp` over `n_paths` common-noise pairs.
pub fn pathwise_gap(exp: &PairExperiment, n_paths: usize) -> Result<GapReport> {
    if exp.levels.is_empty() {
        return Err(Error::InvalidParameter("empty dt ladder".into()));
    }
    let per_path = par_paths(n_paths, |i| exp.levels.iter().map(|&l| exp.legs(i, l).map(|(a, b)| stopped_sup_distance(&a, &b, &exp.drift, exp.tau_r).powf(0.25))).collect::<Result<Vec<_>>>())?;
    let mut rungs = Vec::new();
    for (j, &level) in exp.levels.iter().enumerate() {
        let gap = MeanEstimate::from_samples(&per_path.iter().map(|r| r[j]).collect::<Vec<_>>());
        let h = gap.half_width(CI_SIGMAS);
        rungs.push(GapRung { dt: exp.base_dt / f64::powi(2.0, level as i32), level, gap, ci_lo: gap.mean - h, ci_hi: gap.mean + h });
    }
    let dts: Vec<f64> = rungs.iter().map(|r| r.dt).collect();
    let means: Vec<f64> = rungs.iter().map(|r| r.gap.mean).collect();
    let ests: Vec<MeanEstimate> = rungs.iter().map(|r| r.gap).collect();
    let first = means[0];
    let last = *means.last().expect("nonempty");
    Ok(GapReport {
        scheme_a: exp.scheme_a.tag(),
        scheme_b: exp.scheme_b.tag(),
        drift: exp.drift.tag(),
        paths: n_paths,
        order: loglog_order(&dts, &means),
        monotone: nonincreasing_within_ci(&ests, CI_SIGMAS),
        finest_over_coarsest: if first > 0.0 { last / first } else { 0.0 },
        rungs,
    })
}

// ---------------------------------------------------------------------------
// Lyapunov decomposition

/// `F_ε = Z f_ε` with `Z = exp(−λ[H(t, u(t, x)) + H(t, u(t, y))])`.
pub struct Lyapunov<'a> {
    pub pf: &'a PairFunction,
    pub h: &'a BoundaryFunction,
    pub lambda: f64,
    pub drift: &'a DriftField,
    /// Step of the difference quotients in `A²`.
    pub fd_step: f64,
}

/// Pointwise pieces of `F_ε` at `(t, x, y)`.
#[derive(Debug, Clone, Copy)]
struct Pieces {
    z: f64,
    f: f64,
    fx: Vec2,
    fy: Vec2,
    hx: Vec2,
    hy: Vec2,
}

impl Lyapunov<'_> {
    fn pieces(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<Pieces> {
        let (f, fx, fy) = self.pf.value_grad(t, x, y)?;
        let (hxv, hx) = self.h.composed_value_grad(t, x)?;
        let (hyv, hy) = self.h.composed_value_grad(t, y)?;
        Ok(Pieces { z: (-self.lambda * (hxv + hyv)).exp(), f, fx, fy, hx, hy })
    }

    /// `(F_ε, Z)`.
    pub fn value(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<(f64, f64)> {
        let f = self.pf.value(t, x, y)?;
        let hx = self.h.composed_value_grad(t, x)?.0;
        let hy = self.h.composed_value_grad(t, y)?.0;
        let z = (-self.lambda * (hx + hy)).exp();
        Ok((z * f, z))
    }

    fn gradients(&self, p: &Pieces) -> (Vec2, Vec2) {
        (
            (p.fx - p.hx * (self.lambda * p.f)) * p.z,
            (p.fy - p.hy * (self.lambda * p.f)) * p.z,
        )
    }

    /// Increment of `A¹` for pushes `Δ|L|` at boundary point `x` and `Δ|L̃|`
    /// at `y`, with a scale for the tolerance.
    pub fn a1_increment(&self, t: f64, x: &Vec2, dl: f64, y: &Vec2, dlt: f64) -> Result<(f64, f64)> {
        let dom = self.pf.domain();
        let p = self.pieces(t, x, y)?;
        let (mut inc, mut scale) = (0.0, 0.0);
        if dl > 0.0 {
            let n = dom.boundary_normal(&dom.nearest_boundary_point(x)?);
            let a = -self.lambda * p.f * p.hx.dot(&n) + p.fx.dot(&n);
            inc += p.z * a * dl;
            scale += p.z * (self.lambda * p.f * p.hx.norm() + p.fx.norm()) * dl;
        }
        if dlt > 0.0 {
            let n = dom.boundary_normal(&dom.nearest_boundary_point(y)?);
            let a = -self.lambda * p.f * p.hy.dot(&n) + p.fy.dot(&n);
            inc += p.z * a * dlt;
            scale += p.z * (self.lambda * p.f * p.hy.norm() + p.fy.norm()) * dlt;
        }
        Ok((inc, scale))
    }

    /// Rate of `A²`: `∂_t F + b·∇_x F + b̃·∇_y F + ½ Σ_i (∂_{x_i} + ∂_{y_i})² F`,
    /// all by central differences.
    pub fn a2_rate(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<f64> {
        let h = self.fd_step;
        let t1 = self.pf.transform.horizon();
        let fv = |t: f64, x: &Vec2, y: &Vec2| self.value(t, x, y).map(|v| v.0);
        let f0 = fv(t, x, y)?;
        let (ta, tb) = ((t - 1e-6).max(0.0), (t + 1e-6).min(t1));
        let mut rate = (fv(tb, x, y)? - fv(ta, x, y)?) / (tb - ta);
        let (bx, by) = (self.drift.eval(t, x), self.drift.eval(t, y));
        if bx.norm() > 0.0 {
            rate += (fv(t, &(x + bx * h), y)? - fv(t, &(x - bx * h), y)?) / (2.0 * h);
        }
        if by.norm() > 0.0 {
            rate += (fv(t, x, &(y + by * h))? - fv(t, x, &(y - by * h))?) / (2.0 * h);
        }
        for i in 0..self.pf.domain().dim() {
            let mut e = Vec2::zeros();
            e[i] = h;
            rate += 0.5 * (fv(t, &(x + e), &(y + e))? - 2.0 * f0 + fv(t, &(x - e), &(y - e))?) / (h * h);
        }
        Ok(rate)
    }
}

/// Cumulative terms of the decomposition along one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub times: Vec<f64>,
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    /// `F(t) − F(0) − M − A¹ − A²`.
    pub residual: Vec<f64>,
    /// Per reflection event: `(step, increment, scale)`.
    pub a1_events: Vec<(usize, f64, f64)>,
    /// Steps where `F_ε < M₇ Z |X − X̃|²/ε`.
    pub sandwich_violations: usize,
    pub lambda: f64,
}

impl LyapunovTrace {
    pub fn terminal_residual(&self) -> f64 {
        *self.residual.last().expect("nonempty trace")
    }
}

fn push_point(p: &ReflectedPath, k: usize) -> Vec2 {
    match p.order {
        PushOrder::AfterMove => p.states[k + 1],
        PushOrder::BeforeMove => p.mid[k],
    }
}

/// Evaluates every term group of the decomposition along the pair `(a, b)`;
/// `m7` is used for the lower sandwich check.
///
/// Both legs must push on the recorded grid and in the same order, so that a
/// push of one leg is paired with the other leg at the same instant.
pub fn lyapunov_trace(ly: &Lyapunov<'_>, a: &ReflectedPath, b: &ReflectedPath, m7: f64) -> Result<LyapunovTrace> {
    if a.substeps != 1 || b.substeps != 1 || a.order != b.order {
        return Err(Error::InvalidParameter(format!("legs `{}` and `{}` do not push synchronously", a.scheme, b.scheme)));
    }
    let n = a.steps().min(b.steps());
    let eps = ly.pf.eps;
    let mut tr = LyapunovTrace {
        times: Vec::with_capacity(n + 1),
        f: Vec::with_capacity(n + 1),
        z: Vec::with_capacity(n + 1),
        m: vec![0.0],
        a1: vec![0.0],
        a2: vec![0.0],
        residual: vec![0.0],
        a1_events: Vec::new(),
        sandwich_violations: 0,
        lambda: ly.lambda,
    };
    let (mut m, mut a1, mut a2) = (0.0, 0.0, 0.0);
    for k in 0..=n {
        let t = a.times[k];
        let (x, y) = (a.states[k], b.states[k]);
        let (f, z) = ly.value(t, &x, &y)?;
        tr.times.push(t);
        tr.f.push(f);
        tr.z.push(z);
        let d2 = (x - y).norm_squared();
        if f < m7 * z * d2 / eps - 1e-12 * (eps + d2 / eps) {
            tr.sandwich_violations += 1;
        }
        if k == n {
            break;
        }
        let dt = a.times[k + 1] - t;
        let dw = a.mid[k] - a.states[k] - a.drift_dt[k];
        let p = ly.pieces(t, &x, &y)?;
        let (gx, gy) = ly.gradients(&p);
        m += (gx + gy).dot(&dw);
        a2 += ly.a2_rate(t, &x, &y)? * dt;
        let (dl, dlt) = (a.push[k].norm(), b.push[k].norm());
        if dl > 0.0 || dlt > 0.0 {
            let t1 = match a.order {
                PushOrder::AfterMove => a.times[k + 1],
                PushOrder::BeforeMove => t,
            };
            let (inc, scale) = ly.a1_increment(t1, &push_point(a, k), dl, &push_point(b, k), dlt)?;
            a1 += inc;
            tr.a1_events.push((k, inc, scale));
        }
        tr.m.push(m);
        tr.a1.push(a1);
        tr.a2.push(a2);
    }
    for k in 1..=n {
        tr.residual.push(tr.f[k] - tr.f[0] - tr.m[k] - tr.a1[k] - tr.a2[k]);
    }
    Ok(tr)
}

/// Outcome of the `A¹` sign check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    pub lambda: f64,
    pub ablation: bool,
    pub paths: usize,
    pub events: usize,
    pub violations: usize,
    pub fraction: f64,
    pub worst: f64,
    pub tolerance: f64,
}

impl SignReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Counts reflection events whose `A¹` increment exceeds `10⁻⁸·scale`.
pub fn sign_check_a1(traces: &[LyapunovTrace]) -> SignReport {
    let tol = 1e-8;
    let mut events = 0;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for tr in traces {
        for &(_, inc, scale) in &tr.a1_events {
            events += 1;
            worst = worst.max(inc);
            if inc > tol * scale {
                violations += 1;
            }
        }
    }
    let lambda = traces.first().map(|t| t.lambda).unwrap_or(0.0);
    SignReport {
        lambda,
        ablation: lambda == 0.0,
        paths: traces.len(),
        events,
        violations,
        fraction: if events > 0 { violations as f64 / events as f64 } else { 0.0 },
        worst: if events > 0 { worst } else { 0.0 },
        tolerance: tol,
    }
}

/// Residual statistics over a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub dt: f64,
    pub eps: f64,
    pub lambda: f64,
    pub residual: MeanEstimate,
    pub abs_residual: MeanEstimate,
    pub a1: MeanEstimate,
    pub a2: MeanEstimate,
    pub martingale: MeanEstimate,
    pub within_3_sigma: bool,
    pub sandwich_violations: usize,
    pub min_z: f64,
    pub max_z: f64,
}

pub fn summarize_traces(traces: &[LyapunovTrace], dt: f64, eps: f64) -> ResidualSummary {
    let col = |f: &dyn Fn(&LyapunovTrace) -> f64| MeanEstimate::from_samples(&traces.iter().map(f).collect::<Vec<_>>());
    let residual = col(&|t| t.terminal_residual());
    ResidualSummary {
        dt,
        eps,
        lambda: traces.first().map(|t| t.lambda).unwrap_or(0.0),
        within_3_sigma: residual.within(0.0, 3.0),
        residual,
        abs_residual: col(&|t| t.terminal_residual().abs()),
        a1: col(&|t| *t.a1.last().expect("nonempty")),
        a2: col(&|t| *t.a2.last().expect("nonempty")),
        martingale: col(&|t| *t.m.last().expect("nonempty")),
        sandwich_violations: traces.iter().map(|t| t.sandwich_violations).sum(),
        min_z: traces.iter().flat_map(|t| t.z.iter().cloned()).fold(f64::INFINITY, f64::min),
        max_z: traces.iter().flat_map(|t| t.z.iter().cloned()).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Traces for `n_paths` pairs of `exp` at refinement `level`.
pub fn trace_batch(exp: &PairExperiment, ly: &Lyapunov<'_>, m7: f64, n_paths: usize, level: u32) -> Result<Vec<LyapunovTrace>> {
    if exp.horizon > ly.pf.transform.horizon() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("pair horizon {} exceeds T1 = {}", exp.horizon, ly.pf.transform.horizon())));
    }
    par_paths(n_paths, |i| {
        let (a, b) = exp.legs(i, level)?;
        lyapunov_trace(ly, &a, &b, m7)
    })
}

// ---------------------------------------------------------------------------
// Stochastic Gronwall

/// One sampled path of `(ξ, η, A, M)` on a common grid; `A` is cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallPath {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub a: Vec<f64>,
    pub m: Vec<f64>,
}

/// Both sides of the stochastic Gronwall bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub p: f64,
    pub q: f64,
    pub prefactor: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_rel_stderr: f64,
    pub pass: bool,
}

/// `(p/(p−q))^{1/q}`.
pub fn gronwall_prefactor(p: f64, q: f64) -> f64 {
    (p / (p - q)).powf(1.0 / q)
}

/// `[E(ξ*)^q]^{1/q}` against `(p/(p−q))^{1/q} (E e^{pA/(1−p)})^{(1−p)/p} E η*`,
/// after checking `ξ_k ≤ η_k + Σ_{j<k} ξ_j ΔA_j + M_k` on every path.
pub fn stochastic_gronwall_bound(paths: &[GronwallPath], p: f64, q: f64) -> Result<GronwallReport> {
    if !(0.0 < q && q < p && p < 1.0) {
        return Err(Error::InvalidParameter(format!("need 0 < q < p < 1, got p = {p}, q = {q}")));
    }
    let mut xq = Vec::with_capacity(paths.len());
    let mut ea = Vec::with_capacity(paths.len());
    let mut es = Vec::with_capacity(paths.len());
    for (i, gp) in paths.iter().enumerate() {
        let n = gp.xi.len();
        if gp.eta.len() != n || gp.a.len() != n || gp.m.len() != n || n == 0 {
            return Err(Error::InvalidParameter(format!("path {i}: ragged inputs")));
        }
        let mut integral = 0.0;
        for k in 0..n {
            if k > 0 {
                let da = gp.a[k] - gp.a[k - 1];
                if da < 0.0 {
                    return Err(Error::HypothesisViolated { path: i, step: k, detail: "A decreases".into() });
                }
                integral += gp.xi[k - 1] * da;
            }
            if gp.xi[k] < 0.0 || gp.eta[k] < 0.0 {
                return Err(Error::HypothesisViolated { path: i, step: k, detail: "negative input".into() });
            }
            let rhs = gp.eta[k] + integral + gp.m[k];
            if gp.xi[k] > rhs + 1e-12 * (1.0 + rhs.abs()) {
                return Err(Error::HypothesisViolated { path: i, step: k, detail: format!("xi = {} > {rhs}", gp.xi[k]) });
            }
        }
        xq.push(gp.xi.iter().cloned().fold(0.0, f64::max).powf(q));
        es.push(gp.eta.iter().cloned().fold(0.0, f64::max));
        ea.push((p * gp.a[n - 1] / (1.0 - p)).exp());
    }
    let mx = MeanEstimate::from_samples(&xq);
    let lhs = mx.mean.powf(1.0 / q);
    let rel = if mx.mean > 0.0 { mx.stderr / mx.mean / q } else { 0.0 };
    let prefactor = gronwall_prefactor(p, q);
    let rhs = prefactor * MeanEstimate::from_samples(&ea).mean.powf((1.0 - p) / p) * MeanEstimate::from_samples(&es).mean;
    Ok(GronwallReport { p, q, prefactor, lhs, rhs, lhs_rel_stderr: rel, pass: lhs <= rhs * (1.0 + 3.0 * rel) })
}

/// Gronwall inputs from a trace: `ξ = F_ε`, `M` the martingale part, `A` the
/// running integral of `1 + |b(X)|`, and `η` collecting `F_ε(0)` with the
/// positive parts of the `A¹`, `A²` and residual increments, which makes the
/// hypothesis hold step by step.
pub fn gronwall_inputs(tr: &LyapunovTrace, a: &ReflectedPath, drift: &DriftField) -> GronwallPath {
    let n = tr.f.len();
    let mut eta = Vec::with_capacity(n);
    let mut acc = vec![0.0];
    let mut e = tr.f[0];
    eta.push(e);
    for k in 1..n {
        let inc = |v: &[f64]| (v[k] - v[k - 1]).max(0.0);
        e += inc(&tr.a1) + inc(&tr.a2) + inc(&tr.residual);
        eta.push(e);
        let dt = tr.times[k] - tr.times[k - 1];
        acc.push(acc[k - 1] + (1.0 + drift.eval(tr.times[k - 1], &a.states[k - 1]).norm()) * dt);
    }
    GronwallPath { xi: tr.f.clone(), eta, a: acc, m: tr.m.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::Resolution;
    use crate::testfns::{DupuisG, PreimageH};
    use crate::zvonkin::{build_transform, SelectOptions};
    use std::sync::Arc;

    fn interval_exp(a: Scheme, b: Scheme, drift: DriftField) -> PairExperiment {
        PairExperiment {
            scheme_a: a,
            scheme_b: b,
            drift,
            domain: DomainSpec::interval(0.0, 1.0).unwrap(),
            x0: Vec2::new(0.2, 0.0),
            x0_b: None,
            horizon: 0.25,
            base_dt: 1.0 / 64.0,
            levels: vec![0, 1, 2],
            seed: 4,
            tau_r: None,
        }
    }

    #[test]
    fn identical_schemes_have_zero_gap() {
        let e = interval_exp(Scheme::projection(), Scheme::projection(), DriftField::sign1d(2.0, 0.5, 1));
        let r = pathwise_gap(&e, 50).unwrap();
        assert!(r.rungs.iter().all(|g| g.gap.mean == 0.0));
        assert_eq!(r.finest_over_coarsest, 0.0);
    }

    #[test]
    fn gap_ladder_is_deterministic() {
        let e = interval_exp(Scheme::projection(), Scheme::penalization(), DriftField::zero(1));
        let a = pathwise_gap(&e, 64).unwrap();
        let b = pathwise_gap(&e, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.rungs[0].gap.mean > 0.0);
    }

    #[test]
    fn tau_r_stops_early() {
        let mut e = interval_exp(Scheme::projection(), Scheme::penalization(), DriftField::zero(1));
        let (a, b) = e.legs(0, 0).unwrap();
        assert_eq!(stopped_len(&a, &e.drift, None), a.states.len());
        // C_t = t for zero drift, so R = 2 dt keeps t_0, t_1, t_2
        assert_eq!(stopped_len(&a, &e.drift, Some(2.0 / 64.0)), 3);
        assert!(stopped_sup_distance(&a, &b, &e.drift, Some(1e-9)) <= sup_distance(&a, &b));
        e.tau_r = Some(10.0);
        let full = pathwise_gap(&e, 16).unwrap();
        e.tau_r = None;
        assert_eq!(full.rungs, pathwise_gap(&e, 16).unwrap().rungs);
    }

    #[test]
    fn gronwall_constants() {
        assert!((gronwall_prefactor(0.5, 0.25) - 16.0).abs() < 1e-12);
        let p = GronwallPath { xi: vec![2.0; 5], eta: vec![2.0; 5], a: vec![0.0; 5], m: vec![0.0; 5] };
        let r = stochastic_gronwall_bound(&[p.clone(), p], 0.5, 0.25).unwrap();
        assert!((r.lhs - 2.0).abs() < 1e-12);
        assert!((r.rhs - 32.0).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn gronwall_rejects_bad_inputs() {
        let p = GronwallPath { xi: vec![1.0, 3.0], eta: vec![1.0, 1.0], a: vec![0.0, 0.0], m: vec![0.0, 0.0] };
        assert!(matches!(stochastic_gronwall_bound(&[p], 0.5, 0.25), Err(Error::HypothesisViolated { step: 1, .. })));
        assert!(stochastic_gronwall_bound(&[], 0.25, 0.5).is_err());
    }

    fn disk_setup() -> (Arc<crate::zvonkin::ZvonkinTransform>, BoundaryFunction) {
        let dom = DomainSpec::disk(1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 256.0, 1.0 / 16.0), ..Default::default() };
        let z = Arc::new(build_transform(dom, &DriftField::zero(2), 0.125, &opts).unwrap());
        let h = BoundaryFunction::Preimage(PreimageH { transform: z.clone() });
        (z, h)
    }

    #[test]
    fn coincident_pair_has_f_equal_eps_z() {
        let (z, h) = disk_setup();
        let pf = PairFunction::new(z, DupuisG::new(PI_3).unwrap(), 0.1).unwrap();
        let drift = DriftField::zero(2);
        let ly = Lyapunov { pf: &pf, h: &h, lambda: 2.0, drift: &drift, fd_step: 1e-4 };
        let e = PairExperiment {
            scheme_a: Scheme::projection(),
            scheme_b: Scheme::projection(),
            drift: drift.clone(),
            domain: DomainSpec::disk(1.0).unwrap(),
            x0: Vec2::new(0.9, 0.0),
            x0_b: None,
            horizon: 0.125,
            base_dt: 1.0 / 64.0,
            levels: vec![1],
            seed: 2,
            tau_r: None,
        };
        let (a, b) = e.legs(3, 1).unwrap();
        let tr = lyapunov_trace(&ly, &a, &b, 0.1).unwrap();
        for (f, z) in tr.f.iter().zip(&tr.z) {
            assert!((f - 0.1 * z).abs() < 1e-12);
            assert!(*z > 0.0 && *z <= 1.0);
        }
        assert_eq!(tr.sandwich_violations, 0);
        assert!(!tr.a1_events.is_empty());
    }

    const PI_3: f64 = std::f64::consts::FRAC_PI_3;

    #[test]
    fn no_reflection_means_no_a1() {
        let (z, h) = disk_setup();
        let pf = PairFunction::new(z, DupuisG::new(PI_3).unwrap(), 0.1).unwrap();
        let drift = DriftField::zero(2);
        let ly = Lyapunov { pf: &pf, h: &h, lambda: 2.0, drift: &drift, fd_step: 1e-4 };
        let e = PairExperiment {
            scheme_a: Scheme::projection(),
            scheme_b: Scheme::projection(),
            drift: drift.clone(),
            domain: DomainSpec::disk(1.0).unwrap(),
            x0: Vec2::new(0.0, 0.0),
            x0_b: Some(Vec2::new(0.01, 0.0)),
            horizon: 0.125,
            base_dt: 1.0 / 64.0,
            levels: vec![0],
            seed: 2,
            tau_r: None,
        };
        for i in 0..20 {
            let (a, b) = e.legs(i, 0).unwrap();
            if a.reflections + b.reflections == 0 {
                let tr = lyapunov_trace(&ly, &a, &b, 0.0).unwrap();
                assert!(tr.a1.iter().all(|v| *v == 0.0));
                let g = gronwall_inputs(&tr, &a, &drift);
                stochastic_gronwall_bound(&[g], 0.5, 0.25).unwrap();
            }
        }
    }
}
