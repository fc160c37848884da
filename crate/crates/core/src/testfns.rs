//! Test functions: the local `h`, the boundary function `H`, the Dupuis-type
//! `g`, `ω = σ∘g` and the pair function `f_ε`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flows::{cone_cz_contains, flow_steps, hitting_time, Anchor, DirectionField, HittingOptions};
use crate::geometry::DomainSpec;
use crate::ledger::{ConstantsLedger, Provenance};
use crate::smooth::{cutoff, cutoff_deriv, smoothstep};
use crate::zvonkin::ZvonkinTransform;
use crate::{Error, Mat2, Result, Vec2};

// ---------------------------------------------------------------------------
// σ

/// `σ = 1` below ½, `σ(t) = t` above 2, convex in between.
///
/// On `[½, 2]`, `σ''` is a Beta(2, 4) density rescaled to the interval; its
/// mean is 1, which makes `σ(2) = 2`. Convexity gives `σ ≥ t` and `σ' ≥ 0`.
pub fn sigma(t: f64) -> f64 {
    if t <= 0.5 {
        1.0
    } else if t >= 2.0 {
        t
    } else {
        let x = (t - 0.5) / 1.5;
        let x3 = x * x * x;
        1.0 + 1.5 * x3 * (10.0 / 3.0 + x * (-5.0 + x * (3.0 - 2.0 / 3.0 * x)))
    }
}

pub fn sigma_d1(t: f64) -> f64 {
    if t <= 0.5 {
        0.0
    } else if t >= 2.0 {
        1.0
    } else {
        let x = (t - 0.5) / 1.5;
        x * x * (10.0 + x * (-20.0 + x * (15.0 - 4.0 * x)))
    }
}

pub fn sigma_d2(t: f64) -> f64 {
    if t <= 0.5 || t >= 2.0 {
        0.0
    } else {
        let x = (t - 0.5) / 1.5;
        20.0 * x * (1.0 - x).powi(3) / 1.5
    }
}

// ---------------------------------------------------------------------------
// g

/// `g(ρ, ξ) = |ρ|² Φ(ρ·ξ/|ρ|)` with `Φ(s) = 1 − s²` on `|s| ≤ cos θ₀` and
/// cubic tails outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DupuisG {
    pub theta0: f64,
    pub cos0: f64,
    pub m4: f64,
    /// `NaN` until [`DupuisG::verify`] has fitted it.
    pub m5: f64,
}

/// Outcome of one sampled property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack seen (negative means violated).
    pub worst_margin: f64,
}

impl PropertyCheck {
    fn new(name: &str) -> Self {
        PropertyCheck { name: name.into(), samples: 0, violations: 0, worst_margin: f64::INFINITY }
    }

    fn record(&mut self, margin: f64) {
        self.samples += 1;
        self.worst_margin = self.worst_margin.min(margin);
        if margin < 0.0 {
            self.violations += 1;
        }
    }

    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DupuisReport {
    pub theta0: f64,
    pub m4: f64,
    pub m5: f64,
    pub properties: Vec<PropertyCheck>,
}

impl DupuisReport {
    pub fn pass(&self) -> bool {
        self.properties.iter().all(PropertyCheck::pass)
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec2 {
    if dim == 1 {
        return Vec2::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0);
    }
    let a = 2.0 * PI * rng.random::<f64>();
    Vec2::new(a.cos(), a.sin())
}

impl DupuisG {
    pub fn new(theta0: f64) -> Result<Self> {
        if !(theta0 > 0.0 && theta0 < 0.5 * PI) {
            return Err(Error::InvalidParameter(format!("θ₀ = {theta0} outside (0, π/2)")));
        }
        let mut g = DupuisG { theta0, cos0: theta0.cos(), m4: f64::NAN, m5: f64::NAN };
        g.m4 = (0..=100_000).map(|k| g.phi(-1.0 + 2.0 * k as f64 / 100_000.0)).fold(f64::INFINITY, f64::min);
        Ok(g)
    }

    pub fn phi(&self, s: f64) -> f64 {
        let c = self.cos0;
        let base = 1.0 - s * s;
        if s > c {
            base + (s - c).powi(3)
        } else if s < -c {
            base + (-s - c).powi(3)
        } else {
            base
        }
    }

    pub fn phi_d1(&self, s: f64) -> f64 {
        let c = self.cos0;
        if s > c {
            -2.0 * s + 3.0 * (s - c).powi(2)
        } else if s < -c {
            -2.0 * s - 3.0 * (-s - c).powi(2)
        } else {
            -2.0 * s
        }
    }

    pub fn eval(&self, rho: &Vec2, xi: &Vec2) -> f64 {
        let r = rho.norm();
        if r == 0.0 {
            return 0.0;
        }
        r * r * self.phi(rho.dot(xi) / r)
    }

    /// `(∇_ρ g, ∇_ξ g)`.
    pub fn grad(&self, rho: &Vec2, xi: &Vec2) -> (Vec2, Vec2) {
        let r = rho.norm();
        if r == 0.0 {
            return (Vec2::zeros(), Vec2::zeros());
        }
        let s = rho.dot(xi) / r;
        let (p, dp) = (self.phi(s), self.phi_d1(s));
        (rho * (2.0 * p) + (xi * r - rho * s) * dp, rho * (r * dp))
    }

    /// Second derivatives `(∂ρρ, ∂ξρ, ∂ξξ)` by central differences of the
    /// gradient; `∂ξρ[(i, j)] = ∂_{ξ_j} ∂_{ρ_i} g`.
    pub fn hessians(&self, rho: &Vec2, xi: &Vec2, dim: usize) -> (Mat2, Mat2, Mat2) {
        let hr = 1e-6 * rho.norm().max(1e-3);
        let hx = 1e-6;
        let (mut rr, mut xr, mut xx) = (Mat2::zeros(), Mat2::zeros(), Mat2::zeros());
        for j in 0..dim {
            let mut e = Vec2::zeros();
            e[j] = hr;
            let (gp, _) = self.grad(&(rho + e), xi);
            let (gm, _) = self.grad(&(rho - e), xi);
            rr.set_column(j, &((gp - gm) / (2.0 * hr)));
            let mut e = Vec2::zeros();
            e[j] = hx;
            let (gp, xp) = self.grad(rho, &(xi + e));
            let (gm, xm) = self.grad(rho, &(xi - e));
            xr.set_column(j, &((gp - gm) / (2.0 * hx)));
            xx.set_column(j, &((xp - xm) / (2.0 * hx)));
        }
        (rr, xr, xx)
    }

    /// Samples properties (i)–(vi) on `samples` draws; `M₅` is fitted on the
    /// first half with a 1.25 safety factor and checked on the second.
    pub fn verify(&mut self, samples: usize, dim: usize, seed: u64) -> DupuisReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng, unit: bool| {
            let r = 10f64.powf(-3.0 + 4.0 * rng.random::<f64>());
            let rho = random_unit(rng, dim) * r;
            let len = if unit { 1.0 } else { rng.random::<f64>() };
            (rho, random_unit(rng, dim) * len)
        };
        let ratios = |g: &DupuisG, rho: &Vec2, xi: &Vec2| -> [f64; 5] {
            let r = rho.norm();
            let (gr, gx) = g.grad(rho, xi);
            let (hrr, hxr, hxx) = g.hessians(rho, xi, dim);
            [gr.norm() / r, gx.norm() / (r * r), hrr.amax(), hxr.amax() / r, hxx.amax() / (r * r)]
        };
        let half = samples / 2;
        let mut m5: f64 = 0.0;
        for _ in 0..half {
            let (rho, xi) = draw(&mut rng, false);
            m5 = ratios(self, &rho, &xi).into_iter().fold(m5, f64::max);
        }
        self.m5 = 1.25 * m5;
        let mut checks: Vec<PropertyCheck> =
            ["(i) g(0,ξ)=0", "(ii) g ≥ M4|ρ|²", "(iii) ∇ρg·ξ ≥ 0", "(iv) ∇ρg·ξ ≤ 0", "(v) first-derivative bounds", "(vi) second-derivative bounds"]
                .iter()
                .map(|n| PropertyCheck::new(n))
                .collect();
        for k in 0..samples {
            let (rho, xi) = draw(&mut rng, false);
            let r = rho.norm();
            checks[0].record(-self.eval(&Vec2::zeros(), &xi).abs());
            checks[1].record(self.eval(&rho, &xi) - self.m4 * r * r + 1e-12 * r * r);
            let (rho_u, xi_u) = draw(&mut rng, true);
            let ru = rho_u.norm();
            let s = rho_u.dot(&xi_u) / ru;
            let d = self.grad(&rho_u, &xi_u).0.dot(&xi_u);
            let tol = 1e-12 * ru;
            if s.abs() <= self.cos0 {
                checks[2].record(tol - d.abs());
                checks[3].record(tol - d.abs());
            } else if s > self.cos0 {
                checks[2].record(d + tol);
            } else {
                checks[3].record(tol - d);
            }
            if k >= half || samples < 2 {
                let q = ratios(self, &rho, &xi);
                checks[4].record(self.m5 - q[0].max(q[1]));
                checks[5].record(self.m5 - q[2].max(q[3]).max(q[4]));
            }
        }
        DupuisReport { theta0: self.theta0, m4: self.m4, m5: self.m5, properties: checks }
    }
}

/// Builds `g` for `θ₀` and rejects it unless all six properties hold on the samples.
pub fn dupuis_g(theta0: f64, samples: usize, dim: usize, seed: u64) -> Result<(DupuisG, DupuisReport)> {
    let mut g = DupuisG::new(theta0)?;
    let rep = g.verify(samples, dim, seed);
    if let Some(bad) = rep.properties.iter().find(|p| !p.pass()) {
        return Err(Error::PropertyViolation {
            property: bad.name.clone(),
            detail: format!("{} of {} samples, worst margin {:.3e}", bad.violations, bad.samples, bad.worst_margin),
        });
    }
    Ok((g, rep))
}

// ---------------------------------------------------------------------------
// ω and f_ε

/// `f_ε(t, x, y) = ε ω((u(t,x) − u(t,y))/ε, n(x))`.
#[derive(Debug, Clone)]
pub struct PairFunction {
    pub transform: Arc<ZvonkinTransform>,
    pub g: DupuisG,
    pub eps: f64,
}

/// `(∇_ρ ω, ∇_ξ ω)`.
pub fn omega_grad(g: &DupuisG, rho: &Vec2, xi: &Vec2) -> (Vec2, Vec2) {
    let s1 = sigma_d1(g.eval(rho, xi));
    let (gr, gx) = g.grad(rho, xi);
    (gr * s1, gx * s1)
}

/// Second derivatives of `ω` by the chain rule, same layout as [`DupuisG::hessians`].
pub fn omega_hessians(g: &DupuisG, rho: &Vec2, xi: &Vec2, dim: usize) -> (Mat2, Mat2, Mat2) {
    let gv = g.eval(rho, xi);
    let (s1, s2) = (sigma_d1(gv), sigma_d2(gv));
    let (gr, gx) = g.grad(rho, xi);
    let (hrr, hxr, hxx) = g.hessians(rho, xi, dim);
    (hrr * s1 + gr * gr.transpose() * s2, hxr * s1 + gr * gx.transpose() * s2, hxx * s1 + gx * gx.transpose() * s2)
}

impl PairFunction {
    pub fn new(transform: Arc<ZvonkinTransform>, g: DupuisG, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("ε = {eps} must be positive")));
        }
        Ok(PairFunction { transform, g, eps })
    }

    pub fn domain(&self) -> &DomainSpec {
        self.transform.domain()
    }

    /// `(ρ, ξ)` for the pair.
    pub fn arguments(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<(Vec2, Vec2)> {
        let ux = self.transform.u(t, x)?;
        let uy = self.transform.u(t, y)?;
        Ok(((ux - uy) / self.eps, self.domain().inward_normal_extended(x)))
    }

    pub fn value(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<f64> {
        let (rho, xi) = self.arguments(t, x, y)?;
        Ok(self.eps * sigma(self.g.eval(&rho, &xi)))
    }

    /// `(f_ε, ∇_x f_ε, ∇_y f_ε)`.
    pub fn value_grad(&self, t: f64, x: &Vec2, y: &Vec2) -> Result<(f64, Vec2, Vec2)> {
        let (ux, jx) = self.transform.u_with_grad(t, x)?;
        let (uy, jy) = self.transform.u_with_grad(t, y)?;
        let rho = (ux - uy) / self.eps;
        let xi = self.domain().inward_normal_extended(x);
        let gv = self.g.eval(&rho, &xi);
        let (wr, wx) = omega_grad(&self.g, &rho, &xi);
        let dn = self.domain().normal_jacobian(x);
        let gx = jx.transpose() * wr + dn.transpose() * wx * self.eps;
        let gy = -(jy.transpose() * wr);
        Ok((self.eps * sigma(gv), gx, gy))
    }
}

/// Fitted `M₆`, `M₇` with the ratio that set each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConstants {
    pub m6: f64,
    pub m7: f64,
    pub m6_source: String,
    pub safety: f64,
}

impl PairConstants {
    pub fn lambda(&self) -> f64 {
        self.m6 / self.m7
    }
}

fn sample_pair<R: Rng + ?Sized>(dom: &DomainSpec, rng: &mut R, boundary_x: bool) -> (Vec2, Vec2) {
    let x = if boundary_x { dom.sample_boundary(rng) } else { dom.sample_interior(rng) };
    if rng.random::<f64>() < 0.5 {
        return (x, dom.sample_interior(rng));
    }
    loop {
        let r = 10f64.powf(-4.0 + 3.5 * rng.random::<f64>()) * dom.uniform_sphere_radius();
        let y = x + random_unit(rng, dom.dim()) * r;
        if dom.contains_closed(&y) {
            return (x, y);
        }
    }
}

/// Directional difference quotient of `f_ε` in its first (`first = true`) or
/// second argument along the inward normal there.
fn normal_difference(pf: &PairFunction, t: f64, x: &Vec2, y: &Vec2, first: bool) -> Result<f64> {
    let h = 1e-7;
    if first {
        let n = pf.domain().inward_normal_extended(x);
        Ok((pf.value(t, &(x + n * h), y)? - pf.value(t, &(x - n * h), y)?) / (2.0 * h))
    } else {
        let n = pf.domain().inward_normal_extended(y);
        Ok((pf.value(t, x, &(y + n * h))? - pf.value(t, x, &(y - n * h))?) / (2.0 * h))
    }
}

/// Ratios whose maxima bound `M₆` and whose minimum bounds `M₇`.
fn pair_ratios(pf: &PairFunction, samples: usize, seed: u64) -> Result<(f64, String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = *pf.domain();
    let dim = dom.dim();
    let t1 = pf.transform.horizon();
    let mut m6: f64 = 0.0;
    let mut src = String::from("none");
    let mut m7 = f64::INFINITY;
    let bump = |v: f64, name: &str, m6: &mut f64, src: &mut String| {
        if v > *m6 {
            *m6 = v;
            *src = name.to_string();
        }
    };
    for _ in 0..samples {
        let r = 10f64.powf(-3.0 + 4.0 * rng.random::<f64>());
        let rho = random_unit(&mut rng, dim) * r;
        let xi = random_unit(&mut rng, dim) * rng.random::<f64>();
        let (wr, wx) = omega_grad(&pf.g, &rho, &xi);
        let (hrr, hxr, hxx) = omega_hessians(&pf.g, &rho, &xi, dim);
        bump(wr.norm() / r, "omega first derivatives", &mut m6, &mut src);
        bump(wx.norm() / (r * r), "omega first derivatives", &mut m6, &mut src);
        bump(hrr.amax(), "omega second derivatives", &mut m6, &mut src);
        bump(hxr.amax() / r, "omega second derivatives", &mut m6, &mut src);
        bump(hxx.amax() / (r * r), "omega second derivatives", &mut m6, &mut src);

        let t = t1 * rng.random::<f64>();
        let (x, y) = sample_pair(&dom, &mut rng, false);
        let d2 = (x - y).norm_squared();
        if d2 > 1e-20 {
            let f = pf.value(t, &x, &y)?;
            bump((f - pf.eps) * pf.eps / d2, "sandwich upper", &mut m6, &mut src);
            m7 = m7.min(f * pf.eps / d2);
        }
        let (xb, y) = sample_pair(&dom, &mut rng, true);
        let d2 = (xb - y).norm_squared();
        if d2 > 1e-20 {
            bump(normal_difference(pf, t, &xb, &y, true)? * pf.eps / d2, "boundary derivative in x", &mut m6, &mut src);
            bump(normal_difference(pf, t, &y, &xb, false)? * pf.eps / d2, "boundary derivative in y", &mut m6, &mut src);
        }
    }
    Ok((m6, src, m7))
}

/// Fits `M₆` (max ratio × `safety`) and `M₇` (min ratio / `safety`).
pub fn fit_pair_constants(pf: &PairFunction, samples: usize, seed: u64, safety: f64) -> Result<PairConstants> {
    let (m6, src, m7) = pair_ratios(pf, samples, seed)?;
    if !(m7 > 0.0 && m7.is_finite()) {
        return Err(Error::NonConvergence(format!("M7 fit degenerate: {m7}")));
    }
    Ok(PairConstants { m6: safety * m6, m7: m7 / safety, m6_source: src, safety })
}

/// Two-sided bound `M₇|x−y|²/ε ≤ f_ε ≤ ε + M₆|x−y|²/ε` on fresh pairs.
pub fn sandwich_check(pf: &PairFunction, c: &PairConstants, samples: usize, seed: u64) -> Result<[PropertyCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = *pf.domain();
    let mut lower = PropertyCheck::new("sandwich lower");
    let mut upper = PropertyCheck::new("sandwich upper");
    for _ in 0..samples {
        let t = pf.transform.horizon() * rng.random::<f64>();
        let (x, y) = sample_pair(&dom, &mut rng, false);
        let d2 = (x - y).norm_squared();
        let f = pf.value(t, &x, &y)?;
        let scale = pf.eps + d2 / pf.eps;
        lower.record(f - c.m7 * d2 / pf.eps + 1e-12 * scale);
        upper.record(pf.eps + c.m6 * d2 / pf.eps - f + 1e-12 * scale);
    }
    Ok([lower, upper])
}

/// Normal-derivative bounds at boundary points, both arguments, by differences.
pub fn boundary_derivative_checks(pf: &PairFunction, c: &PairConstants, samples: usize, seed: u64) -> Result<[PropertyCheck; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = *pf.domain();
    let mut bx = PropertyCheck::new("normal derivative in x at boundary x");
    let mut by = PropertyCheck::new("normal derivative in y at boundary y");
    for _ in 0..samples {
        let t = pf.transform.horizon() * rng.random::<f64>();
        let (xb, y) = sample_pair(&dom, &mut rng, true);
        let d2 = (xb - y).norm_squared();
        let bound = c.m6 * d2 / pf.eps + 1e-6;
        bx.record(bound - normal_difference(pf, t, &xb, &y, true)?);
        by.record(bound - normal_difference(pf, t, &y, &xb, false)?);
    }
    Ok([bx, by])
}

// ---------------------------------------------------------------------------
// h and H

/// Constants used by the local functions and the cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConstants {
    pub theta0: f64,
    pub theta1: f64,
    pub delta5: f64,
    pub rho1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub kappa: f64,
}

impl PatchConstants {
    /// Reads `θ₀, θ₁, δ₅, ρ₁, η₂, κ` and, if present, `η₃` (else `η₂/2`).
    pub fn from_ledger(l: &ConstantsLedger) -> Result<Self> {
        let eta2 = l.get("eta2")?;
        Ok(PatchConstants {
            theta0: l.get("theta0")?,
            theta1: l.get("theta1")?,
            delta5: l.get("delta5")?,
            rho1: l.get("rho1")?,
            eta2,
            eta3: l.try_get("eta3").unwrap_or(0.5 * eta2),
            kappa: l.get("kappa")?,
        })
    }

    /// Radius `δ₅ tan θ₁` of the bump on the hyperplane.
    pub fn bump_radius(&self) -> f64 {
        self.delta5 * self.theta1.tan()
    }
}

/// `u₀(y) = (1 − |w|²/r²)²` with `w = y − z` projected on the hyperplane `⊥ axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub center: Vec2,
    pub axis: Vec2,
    pub radius: f64,
}

impl BumpProfile {
    pub fn value_grad(&self, y: &Vec2) -> (f64, Vec2) {
        let v = y - self.center;
        let w = v - self.axis * v.dot(&self.axis);
        let q = w.norm_squared() / (self.radius * self.radius);
        if q >= 1.0 {
            return (0.0, Vec2::zeros());
        }
        ((1.0 - q) * (1.0 - q), w * (-4.0 * (1.0 - q) / (self.radius * self.radius)))
    }
}

/// Data of one local function `h` anchored at `(t₀, z₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub t0: f64,
    pub z0: Vec2,
    /// `z = y(t₀, z₀, δ₅/2)`.
    pub z: Vec2,
    /// `γ(t₀, z)`.
    pub axis: Vec2,
    /// `γ(t₀, z₀)`.
    pub axis0: Vec2,
    /// Offset `M` of `χ₂`.
    pub m: f64,
}

impl Patch {
    pub fn new(dir: &DirectionField, c: &PatchConstants, t0: f64, z0: Vec2) -> Self {
        let z = flow_steps(dir, t0, &z0, 0.5 * c.delta5, 16, false).y;
        Patch { t0, z0, z, axis: dir.eval(t0, &z), axis0: dir.eval(t0, &z0), m: 1.5 * c.delta5 + 1.0 }
    }

    pub fn bump(&self, c: &PatchConstants) -> BumpProfile {
        BumpProfile { center: self.z, axis: self.axis, radius: c.bump_radius() }
    }

    /// `h(t, x) = u₀(y(t, x, Γᶻ(t, x)))` and its gradient; zero where no hitting time exists.
    pub fn local_h(&self, dir: &DirectionField, c: &PatchConstants, t: f64, x: &Vec2) -> Result<(f64, Vec2)> {
        let rec = match hitting_time(dir, t, x, self.t0, &self.z, &HittingOptions::new(c.rho1)) {
            Ok(r) => r,
            Err(Error::NoRootInInterval { .. }) => return Ok((0.0, Vec2::zeros())),
            Err(e) => return Err(e),
        };
        let (v, du0) = self.bump(c).value_grad(&rec.hit_point);
        if v == 0.0 {
            return Ok((0.0, Vec2::zeros()));
        }
        let s = crate::flows::flow_steps(dir, t, x, rec.gamma, HittingOptions::new(c.rho1).steps.max(1), false);
        let g_end = dir.eval(t, &rec.hit_point);
        let mut grad = s.psi.transpose() * du0 + rec.grad_gamma * du0.dot(&g_end);
        if dir.dim() == 1 {
            grad.y = 0.0;
        }
        Ok((v, grad))
    }

    /// `χ₁(t, x)` and its spatial gradient.
    pub fn chi1(&self, c: &PatchConstants, t: f64, x: &Vec2) -> (f64, Vec2) {
        let ct = cutoff((t - self.t0).abs(), 0.5 * c.eta3, c.eta3);
        let v = x - self.z;
        let r = v.norm();
        let (lo, hi) = (c.kappa * c.delta5, c.delta5);
        let cx = cutoff(r, lo, hi);
        let g = if r > 0.0 { v * (ct * cutoff_deriv(r, lo, hi) / r) } else { Vec2::zeros() };
        (ct * cx, g)
    }

    /// `h χ₁ χ₂` and its gradient.
    pub fn value_grad(&self, dir: &DirectionField, c: &PatchConstants, t: f64, x: &Vec2) -> Result<(f64, Vec2)> {
        let (c1, dc1) = self.chi1(c, t, x);
        if c1 == 0.0 {
            return Ok((0.0, Vec2::zeros()));
        }
        let (h, dh) = self.local_h(dir, c, t, x)?;
        if h == 0.0 {
            return Ok((0.0, Vec2::zeros()));
        }
        let c2 = (x - self.z0).dot(&self.axis0) + self.m;
        Ok((h * c1 * c2, dh * (c1 * c2) + dc1 * (h * c2) + self.axis0 * (h * c1)))
    }
}

/// Boundary images `u(t, x_b)` for `x_b ∈ ∂D` near the preimage of `y`.
fn boundary_images_near(dir: &DirectionField, t: f64, y: &Vec2, arc: f64, count: usize) -> Result<Vec<Vec2>> {
    let dom = *dir.transform.domain();
    let x = dir.transform.invert_raw(t, y)?;
    if dom.dim() == 1 {
        return [dom.boundary_point(0.25), dom.boundary_point(0.75)].iter().map(|p| dir.transform.u(t, p)).collect();
    }
    let s0 = dom.boundary_param(&dom.nearest_boundary_point(&x)?);
    let span = arc / dom.boundary_measure();
    (0..count)
        .map(|k| {
            let s = (s0 + span * (k as f64 / (count - 1) as f64 - 0.5)).rem_euclid(1.0);
            dir.transform.u(t, &dom.boundary_point(s))
        })
        .collect()
}

/// Boundary images inside `C̄(z, δ₅) \ B(z, κ δ₅)` over a time window around `t₀`.
pub fn kappa_annulus_violations(dir: &DirectionField, c: &PatchConstants, patch: &Patch, eta: f64, samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t1 = dir.horizon();
    let mut bad = 0;
    for k in 0..samples {
        let t = if k == 0 { patch.t0 } else { ((patch.t0 - eta).max(0.0)) + ((patch.t0 + eta).min(t1) - (patch.t0 - eta).max(0.0)) * rng.random::<f64>() };
        for y in boundary_images_near(dir, t, &patch.z, 6.0 * c.delta5, 65)? {
            let d = (y - patch.z).norm();
            let in_closure = d <= c.delta5 && {
                let v = y - patch.z;
                let a = patch.axis.normalize();
                (v - a * v.dot(&a)).norm() <= 2.0 * c.delta5 * c.theta1.tan()
            };
            if in_closure && d >= c.kappa * c.delta5 {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Largest `η₃ = η₂/2^k` with no κ-annulus violations at the anchors.
pub fn fit_eta3(dir: &DirectionField, c: &PatchConstants, anchors: &[Anchor], samples: usize, seed: u64) -> Result<f64> {
    let patches: Vec<Patch> = anchors.iter().map(|a| Patch::new(dir, c, a.t0, a.z0)).collect();
    let mut eta = 0.5 * c.eta2;
    for _ in 0..40 {
        let mut ok = true;
        for (i, p) in patches.iter().enumerate() {
            if kappa_annulus_violations(dir, c, p, eta, samples, seed ^ i as u64)? > 0 {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(eta);
        }
        eta *= 0.5;
    }
    Err(Error::NonConvergence("η₃ sweep".into()))
}

/// Support containment: points of `B(z, δ₅)` with `h > 0` lie in `C(z, δ₅)`.
pub fn support_check(dir: &DirectionField, c: &PatchConstants, patch: &Patch, samples: usize, seed: u64) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chk = PropertyCheck::new("supp h ∩ B(z,δ5) ⊂ C(z,δ5)");
    let t1 = dir.horizon();
    for _ in 0..samples {
        let t = ((patch.t0 - c.eta2).max(0.0)) + ((patch.t0 + c.eta2).min(t1) - (patch.t0 - c.eta2).max(0.0)) * rng.random::<f64>();
        let x = if dir.dim() == 1 {
            Vec2::new(patch.z.x + c.delta5 * (2.0 * rng.random::<f64>() - 1.0), 0.0)
        } else {
            // Oversample the strip around the axis where the support lives.
            let a = patch.axis.normalize();
            let perp = Vec2::new(-a.y, a.x);
            let along = c.delta5 * (2.0 * rng.random::<f64>() - 1.0);
            let across = 4.0 * c.bump_radius() * (2.0 * rng.random::<f64>() - 1.0);
            patch.z + a * along + perp * across
        };
        if (x - patch.z).norm() >= c.delta5 {
            continue;
        }
        let (h, _) = patch.local_h(dir, c, t, &x)?;
        if h > 0.0 {
            chk.record(if cone_cz_contains(&patch.z, &patch.axis, c.delta5, c.theta1, &x) { 1.0 } else { -1.0 });
        }
    }
    Ok(chk)
}

/// `H = s·Σ h_{t₀,z₀}` over a greedy cover.
#[derive(Debug, Clone)]
pub struct CoverH {
    pub dir: DirectionField,
    pub consts: PatchConstants,
    pub patches: Vec<Patch>,
    pub scale: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

/// `H(t, y) = ψ(d(u⁻¹(t, y)))` with `d` the signed distance to `∂D` and `ψ`
/// a bounded increasing profile with `ψ'(0) = 1`, `ψ ≥ δ₀/4`.
#[derive(Debug, Clone)]
pub struct PreimageH {
    pub transform: Arc<ZvonkinTransform>,
}

impl PreimageH {
    fn profile(&self, s: f64) -> (f64, f64) {
        let d0 = self.transform.delta0();
        let (a, b) = (0.125 * d0, 0.25 * d0);
        let m = s.abs();
        let (v, dv) = if m <= a {
            (m, 1.0)
        } else if m < b {
            let tau = (m - a) / (b - a);
            let big_s = tau.powi(4) * (2.5 + tau * (-3.0 + tau));
            (m - (b - a) * big_s, 1.0 - smoothstep(tau))
        } else {
            (a + 0.5 * (b - a), 0.0)
        };
        (0.5 * d0 + v * s.signum(), dv)
    }
}

/// A nonnegative `H` with `∇H·γ ≥ 1` on the moving boundary.
#[derive(Debug, Clone)]
pub enum BoundaryFunction {
    Cover(CoverH),
    Preimage(PreimageH),
}

impl BoundaryFunction {
    pub fn dim(&self) -> usize {
        match self {
            BoundaryFunction::Cover(c) => c.dir.dim(),
            BoundaryFunction::Preimage(p) => p.transform.dim(),
        }
    }

    pub fn value_grad(&self, t: f64, y: &Vec2) -> Result<(f64, Vec2)> {
        match self {
            BoundaryFunction::Cover(c) => c.value_grad(t, y),
            BoundaryFunction::Preimage(p) => {
                let x = match p.transform.invert_raw(t, y) {
                    Ok(x) => x,
                    Err(_) => return Ok((p.profile(-1.0).0, Vec2::zeros())),
                };
                let dom = p.transform.domain();
                let s = dom.signed_distance(&x)?;
                let (v, dv) = p.profile(s);
                if dv == 0.0 {
                    return Ok((v, Vec2::zeros()));
                }
                let n = dom.boundary_normal(&dom.nearest_boundary_point(&x)?);
                let j = p.transform.jacobian(t, &x)?;
                let ji = j.try_inverse().ok_or_else(|| Error::InvalidParameter("singular Du".into()))?;
                let mut g = ji.transpose() * n * dv;
                if dom.dim() == 1 {
                    g.y = 0.0;
                }
                Ok((v, g))
            }
        }
    }

    pub fn value(&self, t: f64, y: &Vec2) -> Result<f64> {
        Ok(self.value_grad(t, y)?.0)
    }

    /// `H(t, u(t, x))` and its gradient in `x`.
    ///
    /// The preimage form skips the inversion: `u⁻¹(t, u(t, x)) = x`.
    pub fn composed_value_grad(&self, t: f64, x: &Vec2) -> Result<(f64, Vec2)> {
        match self {
            BoundaryFunction::Cover(c) => {
                let (y, j) = c.dir.transform.u_with_grad(t, x)?;
                let (v, g) = c.value_grad(t, &y)?;
                Ok((v, j.transpose() * g))
            }
            BoundaryFunction::Preimage(p) => {
                let dom = p.transform.domain();
                let (v, dv) = p.profile(dom.signed_distance(x)?);
                if dv == 0.0 {
                    return Ok((v, Vec2::zeros()));
                }
                let n = dom.boundary_normal(&dom.nearest_boundary_point(x)?);
                Ok((v, n * dv))
            }
        }
    }

    /// Hessian by central differences of the gradient.
    pub fn hessian(&self, t: f64, y: &Vec2, h: f64) -> Result<Mat2> {
        let mut m = Mat2::zeros();
        for k in 0..self.dim() {
            let mut e = Vec2::zeros();
            e[k] = h;
            m.set_column(k, &((self.value_grad(t, &(y + e))?.1 - self.value_grad(t, &(y - e))?.1) / (2.0 * h)));
        }
        Ok(m)
    }

    /// `∂_t H` by central differences, one-sided at the ends.
    pub fn dt(&self, t: f64, y: &Vec2, h: f64, t1: f64) -> Result<f64> {
        let (a, b) = ((t - h).max(0.0), (t + h).min(t1));
        Ok((self.value(b, y)? - self.value(a, y)?) / (b - a))
    }
}

impl CoverH {
    fn cell(&self, t: f64, y: &Vec2) -> (i64, i64, i64) {
        let s = self.consts.delta5;
        ((t / self.consts.eta3).floor() as i64, (y.x / s).floor() as i64, (y.y / s).floor() as i64)
    }

    fn nearby(&self, t: f64, y: &Vec2) -> Vec<usize> {
        let (k, i, j) = self.cell(t, y);
        let mut out = Vec::new();
        for dk in -1..=1 {
            for di in -1..=1 {
                for dj in -1..=1 {
                    if let Some(v) = self.cells.get(&(k + dk, i + di, j + dj)) {
                        out.extend_from_slice(v);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn insert(&mut self, p: Patch) {
        let key = self.cell(p.t0, &p.z);
        self.cells.entry(key).or_default().push(self.patches.len());
        self.patches.push(p);
    }

    /// Unscaled sum, or scaled once `scale` is set.
    pub fn value_grad(&self, t: f64, y: &Vec2) -> Result<(f64, Vec2)> {
        let (mut v, mut g) = (0.0, Vec2::zeros());
        for i in self.nearby(t, y) {
            let (pv, pg) = self.patches[i].value_grad(&self.dir, &self.consts, t, y)?;
            v += pv;
            g += pg;
        }
        Ok((self.scale * v, g * self.scale))
    }

    /// Some patch has `χ₁ = 1` and `h ≥ ½` at `(t, y)`.
    fn covers(&self, t: f64, y: &Vec2) -> Result<bool> {
        for i in self.nearby(t, y) {
            let p = &self.patches[i];
            if p.chi1(&self.consts, t, y).0 < 1.0 {
                continue;
            }
            if p.local_h(&self.dir, &self.consts, t, y)?.0 >= 0.5 {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Knobs of [`build_h`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverOptions {
    pub max_patches: usize,
}

impl Default for CoverOptions {
    fn default() -> Self {
        CoverOptions { max_patches: 10_000 }
    }
}

fn cover_grid(dir: &DirectionField, c: &PatchConstants, refine: usize) -> (Vec<f64>, Vec<Vec2>) {
    let dom = *dir.transform.domain();
    let t1 = dir.horizon();
    let dt = 0.5 * c.eta3 / refine as f64;
    let nt = (t1 / dt).ceil() as usize;
    let times = (0..=nt).map(|k| (k as f64 * dt).min(t1)).collect();
    let pts = if dom.dim() == 1 {
        vec![dom.boundary_point(0.25), dom.boundary_point(0.75)]
    } else {
        let n = (dom.boundary_measure() / (0.25 * c.delta5 / refine as f64)).ceil() as usize;
        (0..n).map(|k| dom.boundary_point(k as f64 / n as f64)).collect()
    };
    (times, pts)
}

/// Greedy cover of the moving boundary by patches, then rescaled so that
/// `∇H·γ ≥ 1` on a calibration grid twice as fine as the cover grid.
pub fn build_h(dir: &DirectionField, c: &PatchConstants, opts: &CoverOptions) -> Result<CoverH> {
    let mut h = CoverH { dir: dir.clone(), consts: *c, patches: Vec::new(), scale: 1.0, cells: HashMap::new() };
    let (times, pts) = cover_grid(dir, c, 1);
    if pts.len() > opts.max_patches.saturating_mul(64) {
        return Err(Error::CoverFailure(format!(
            "{} boundary samples at spacing δ5/4 = {:.3e}; the patch cap {} cannot cover them",
            pts.len(),
            0.25 * c.delta5,
            opts.max_patches
        )));
    }
    for &t in &times {
        for xb in &pts {
            let y = dir.transform.u(t, xb)?;
            if h.covers(t, &y)? {
                continue;
            }
            if h.patches.len() >= opts.max_patches {
                return Err(Error::CoverFailure(format!("{} patches do not cover u(t, ∂D); δ5 = {:.3e}", opts.max_patches, c.delta5)));
            }
            h.insert(Patch::new(dir, c, t, y));
        }
    }
    let (times, pts) = cover_grid(dir, c, 2);
    let mut worst = f64::INFINITY;
    for &t in &times {
        for xb in &pts {
            let y = dir.transform.u(t, xb)?;
            worst = worst.min(h.value_grad(t, &y)?.1.dot(&dir.eval(t, &y)));
        }
    }
    if !(worst > 0.0) {
        return Err(Error::CoverFailure(format!("∇H·γ = {worst:.3e} at a calibration point")));
    }
    h.scale = 1.0 / worst;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HReport {
    pub samples: usize,
    pub min_product: f64,
    pub min_value: f64,
    pub threshold: f64,
}

impl HReport {
    pub fn pass(&self) -> bool {
        self.min_product >= self.threshold && self.min_value >= 0.0
    }
}

/// `∇H·γ` and `H` at fresh random boundary points `(t, u(t, x_b))`.
pub fn verify_h(bf: &BoundaryFunction, dir: &DirectionField, samples: usize, seed: u64) -> Result<HReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = *dir.transform.domain();
    let mut rep = HReport { samples, min_product: f64::INFINITY, min_value: f64::INFINITY, threshold: 1.0 - 1e-3 };
    for _ in 0..samples {
        let t = dir.horizon() * rng.random::<f64>();
        let y = dir.transform.u(t, &dom.sample_boundary(&mut rng))?;
        let (v, g) = bf.value_grad(t, &y)?;
        rep.min_value = rep.min_value.min(v);
        rep.min_product = rep.min_product.min(g.dot(&dir.eval(t, &y)));
    }
    Ok(rep)
}

/// Constants produced by the test-function stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFnConstants {
    pub m4: f64,
    pub m5: f64,
    pub m6: f64,
    pub m7: f64,
    pub kappa: f64,
    /// Only the patch cover has a time window.
    pub eta3: Option<f64>,
}

impl TestFnConstants {
    pub fn write_ledger(&self, l: &mut ConstantsLedger) {
        l.set("M4", self.m4, Provenance::Verified, "min of the g profile on [-1, 1]");
        l.set("M5", self.m5, Provenance::Fitted, "max sampled derivative ratio of g times 1.25");
        l.set("M6", self.m6, Provenance::Fitted, "max sampled ratio over omega and f_eps bounds times safety");
        l.set("M7", self.m7, Provenance::Fitted, "min sampled f_eps*eps/|x-y|^2 over safety");
        l.set("kappa", self.kappa, Provenance::Verified, "annulus constant in (1/2, 1)");
        if let Some(e) = self.eta3 {
            l.set("eta3", e, Provenance::Fitted, "annulus-free time window");
        }
        l.set("lambda", self.m6 / self.m7, Provenance::Assumed, "M6/M7");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DriftField;
    use crate::flows::{fit_flow_constants, FitOptions};
    use crate::pde::Resolution;
    use crate::zvonkin::{build_transform, select_t1, solve_kappa, solve_theta1, SelectOptions};

    #[test]
    fn sigma_shape() {
        assert_eq!(sigma(0.0), 1.0);
        assert_eq!(sigma(3.0), 3.0);
        assert!((sigma(2.0) - 2.0).abs() < 1e-14);
        assert!((sigma_d1(2.0 - 1e-12) - 1.0).abs() < 1e-9);
        assert!(sigma_d1(0.5 + 1e-12).abs() < 1e-9);
        let h = 1e-6;
        for k in 0..=300 {
            let t = -0.5 + 3.0 * k as f64 / 300.0;
            assert!(sigma(t) >= t - 1e-15, "σ({t}) < t");
            assert!(sigma_d1(t) >= 0.0);
            let fd = (sigma(t + h) - sigma(t - h)) / (2.0 * h);
            assert!((fd - sigma_d1(t)).abs() < 1e-6);
            let fd2 = (sigma_d1(t + h) - sigma_d1(t - h)) / (2.0 * h);
            assert!((fd2 - sigma_d2(t)).abs() < 1e-5);
        }
    }

    #[test]
    fn g_closed_form_values() {
        let g = DupuisG::new(PI / 3.0).unwrap();
        assert!((g.m4 - 0.125).abs() < 1e-12);
        let xi = Vec2::new(1.0, 0.0);
        assert_eq!(g.eval(&Vec2::zeros(), &xi), 0.0);
        let rho = Vec2::new(0.0, 2.0);
        assert!((g.eval(&rho, &xi) - 4.0).abs() < 1e-14);
        assert_eq!(g.grad(&rho, &xi).0.dot(&xi), 0.0);
        // Φ is C¹ at the band edges.
        let c = g.cos0;
        assert!((g.phi(c + 1e-9) - g.phi(c - 1e-9)).abs() < 1e-8);
        assert!((g.phi_d1(c + 1e-9) - g.phi_d1(c - 1e-9)).abs() < 1e-8);
    }

    #[test]
    fn g_gradient_matches_differences() {
        let g = DupuisG::new(PI / 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..200 {
            let rho = random_unit(&mut rng, 2) * (0.1 + rng.random::<f64>());
            let xi = random_unit(&mut rng, 2) * rng.random::<f64>();
            let (gr, gx) = g.grad(&rho, &xi);
            for k in 0..2 {
                let mut e = Vec2::zeros();
                e[k] = h;
                let fr = (g.eval(&(rho + e), &xi) - g.eval(&(rho - e), &xi)) / (2.0 * h);
                let fx = (g.eval(&rho, &(xi + e)) - g.eval(&rho, &(xi - e))) / (2.0 * h);
                assert!((fr - gr[k]).abs() < 1e-6 && (fx - gx[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn g_properties_hold() {
        for th in [PI / 6.0, PI / 4.0, PI / 3.0] {
            for dim in [1, 2] {
                let (_, rep) = dupuis_g(th, 4000, dim, 11).unwrap();
                assert!(rep.pass(), "{rep:?}");
            }
        }
    }

    fn identity_pair(eps: f64) -> PairFunction {
        let dom = DomainSpec::disk(1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 64.0, 1.0 / 16.0), ..Default::default() };
        let z = build_transform(dom, &DriftField::zero(2), 1.0, &opts).unwrap();
        PairFunction::new(Arc::new(z), DupuisG::new(PI / 3.0).unwrap(), eps).unwrap()
    }

    #[test]
    fn pair_function_basics() {
        let pf = identity_pair(0.1);
        let x = Vec2::new(0.3, 0.4);
        assert!((pf.value(0.5, &x, &x).unwrap() - 0.1).abs() < 1e-15);
        // ξ = 0 at the centre: g = |ρ|² ≥ 2 so σ is linear.
        let x = Vec2::zeros();
        let y = Vec2::new(-0.2, 0.1);
        let want = (x - y).norm_squared() / 0.1;
        assert!((pf.value(0.5, &x, &y).unwrap() - want).abs() < 1e-9);
        let (_, gx, gy) = pf.value_grad(0.5, &x, &y).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut e = Vec2::zeros();
            e[k] = h;
            let fx = (pf.value(0.5, &(x + e), &y).unwrap() - pf.value(0.5, &(x - e), &y).unwrap()) / (2.0 * h);
            let fy = (pf.value(0.5, &x, &(y + e)).unwrap() - pf.value(0.5, &x, &(y - e)).unwrap()) / (2.0 * h);
            assert!((fx - gx[k]).abs() < 1e-5 && (fy - gy[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn pair_bounds_on_identity_disk() {
        let pf = identity_pair(0.1);
        let c = fit_pair_constants(&pf, 1500, 1, 1.25).unwrap();
        assert!(c.m6 > 0.0 && c.m7 > 0.0);
        for chk in sandwich_check(&pf, &c, 1500, 2).unwrap().iter().chain(boundary_derivative_checks(&pf, &c, 1000, 3).unwrap().iter()) {
            assert!(chk.pass(), "{chk:?}");
        }
        // The x = y boundary case has zero normal derivative.
        let xb = Vec2::new(1.0, 0.0);
        assert!(normal_difference(&pf, 0.2, &xb, &xb, true).unwrap().abs() < 1e-6);
    }

    #[test]
    fn preimage_h_on_disk() {
        let pf = identity_pair(0.1);
        let dir = DirectionField::new(pf.transform.clone());
        let bf = BoundaryFunction::Preimage(PreimageH { transform: pf.transform.clone() });
        let rep = verify_h(&bf, &dir, 500, 4).unwrap();
        assert!(rep.pass(), "{rep:?}");
        assert!((rep.min_product - 1.0).abs() < 1e-6);
        // Interior: constant.
        let (v, g) = bf.value_grad(0.3, &Vec2::new(0.1, 0.0)).unwrap();
        assert!(v > 0.0 && g.norm() == 0.0);
    }

    #[test]
    fn local_h_is_constant_along_characteristics() {
        let pf = identity_pair(0.1);
        let dir = DirectionField::new(pf.transform.clone());
        let c = PatchConstants { theta0: 5.0 * PI / 12.0, theta1: 0.0176, delta5: 0.01, rho1: 0.05, eta2: 0.1, eta3: 0.05, kappa: 0.92 };
        let a = 0.7f64;
        let z0 = Vec2::new(a.cos(), a.sin());
        let p = Patch::new(&dir, &c, 0.3, z0);
        assert!((p.local_h(&dir, &c, 0.3, &z0).unwrap().0 - 1.0).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perp = Vec2::new(-p.axis.y, p.axis.x);
        let mut seen = 0;
        for _ in 0..100 {
            let x = p.z + p.axis * (0.008 * (2.0 * rng.random::<f64>() - 1.0)) + perp * (0.9 * c.bump_radius() * (2.0 * rng.random::<f64>() - 1.0));
            let (h, g) = p.local_h(&dir, &c, 0.3, &x).unwrap();
            if h == 0.0 {
                continue;
            }
            seen += 1;
            assert!(g.dot(&dir.eval(0.3, &x)).abs() < 1e-3 * g.norm(), "{g}");
            let e = perp * 1e-8;
            let fd = (p.local_h(&dir, &c, 0.3, &(x + e)).unwrap().0 - p.local_h(&dir, &c, 0.3, &(x - e)).unwrap().0) / 2e-8;
            assert!((fd - g.dot(&perp)).abs() < 1e-3 * g.norm(), "{fd} {}", g.dot(&perp));
        }
        assert!(seen > 50);
    }

    fn interval_setup(drift: DriftField) -> (DirectionField, PatchConstants) {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let s = select_t1(dom, &drift, &SelectOptions::default()).unwrap();
        let mut l = ConstantsLedger::new();
        s.write_ledger(&mut l);
        let th1 = solve_theta1(s.theta0).unwrap().theta1;
        l.set("theta1", th1, Provenance::Verified, "");
        l.set("kappa", solve_kappa(s.theta0, th1).unwrap(), Provenance::Verified, "");
        let dir = DirectionField::new(s.transform);
        fit_flow_constants(&dir, &l, &FitOptions::default()).unwrap().write_ledger(&mut l);
        let mut c = PatchConstants::from_ledger(&l).unwrap();
        let anchors = crate::flows::anchors(&dir, 4, 1).unwrap();
        c.eta3 = fit_eta3(&dir, &c, &anchors, 16, 2).unwrap();
        (dir, c)
    }

    #[test]
    fn local_h_and_cover_on_interval() {
        let (dir, c) = interval_setup(DriftField::zero(1));
        let z0 = dir.transform.u(0.01, &Vec2::new(0.0, 0.0)).unwrap();
        let p = Patch::new(&dir, &c, 0.01, z0);
        let (h0, _) = p.local_h(&dir, &c, 0.01, &z0).unwrap();
        assert!((h0 - 1.0).abs() < 1e-6);
        assert!(support_check(&dir, &c, &p, 200, 5).unwrap().pass());
        let h = build_h(&dir, &c, &CoverOptions::default()).unwrap();
        let bf = BoundaryFunction::Cover(h);
        let rep = verify_h(&bf, &dir, 300, 9).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn cover_cap_is_enforced() {
        let (dir, c) = interval_setup(DriftField::sign1d(2.0, 0.5, 1));
        assert!(matches!(build_h(&dir, &c, &CoverOptions { max_patches: 2 }), Err(Error::CoverFailure(_))));
    }
}
