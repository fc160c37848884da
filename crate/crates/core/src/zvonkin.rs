//! The transform `x ↦ u(t, x)`, its inverse and the geometric checks on the
//! moving domains `u(t, D)`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::{DriftField, Interpolation};
use crate::geometry::{Cone, DomainSpec};
use crate::ledger::{ConstantsLedger, Provenance};
use crate::pde::{extend_across_boundary, holder_estimate, solve_neumann_terminal, ExtendedField, HolderFit, ParabolicProblem, Resolution};
use crate::{Error, Mat2, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iter: 60, tol: 1e-11 }
    }
}

/// `u = u^{T₁}` on `[0, T₁] × G'` together with a Newton inverse.
#[derive(Debug, Clone)]
pub struct ZvonkinTransform {
    pub ext: ExtendedField,
    pub newton: NewtonOptions,
    /// Per stored slice: `(u(t_s, x), x)` over a thinned node set.
    lookup: Vec<OnceLock<Vec<(Vec2, Vec2)>>>,
}

impl ZvonkinTransform {
    pub fn new(ext: ExtendedField) -> Self {
        let n = ext.field.times.len();
        ZvonkinTransform { ext, newton: NewtonOptions::default(), lookup: (0..n).map(|_| OnceLock::new()).collect() }
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.ext.domain
    }

    pub fn dim(&self) -> usize {
        self.ext.dim()
    }

    /// The horizon `T₁` of the underlying solve.
    pub fn horizon(&self) -> f64 {
        self.ext.horizon()
    }

    pub fn delta0(&self) -> f64 {
        self.ext.domain.uniform_sphere_radius()
    }

    /// `x ∈ G = {d(x, D) < δ₀/2}`.
    pub fn in_g(&self, x: &Vec2) -> bool {
        self.ext.domain.distance_to_domain(x).map(|d| d < 0.5 * self.delta0()).unwrap_or(false)
    }

    pub fn u(&self, t: f64, x: &Vec2) -> Result<Vec2> {
        self.ext.u(t, x)
    }

    pub fn u_with_grad(&self, t: f64, x: &Vec2) -> Result<(Vec2, Mat2)> {
        self.ext.u_with_grad(t, x)
    }

    /// Central-difference Jacobian `J[(i, k)] = ∂_k u^i`.
    pub fn jacobian(&self, t: f64, x: &Vec2) -> Result<Mat2> {
        let h = 1e-6 * self.delta0();
        let mut j = Mat2::identity();
        for k in 0..self.dim() {
            let mut e = Vec2::zeros();
            e[k] = h;
            let col = (self.u(t, &(x + e))? - self.u(t, &(x - e))?) / (2.0 * h);
            j.set_column(k, &col);
        }
        Ok(j)
    }

    fn solve_step(&self, j: &Mat2, r: &Vec2) -> Option<Vec2> {
        if self.dim() == 1 {
            let d = j[(0, 0)];
            (d != 0.0).then(|| Vec2::new(r.x / d, 0.0))
        } else {
            j.try_inverse().map(|inv| inv * r)
        }
    }

    fn newton_from(&self, t: f64, y: &Vec2, x0: Vec2) -> Result<Vec2> {
        let (mut x, mut ux_j) = (x0, self.u_with_grad(t, &x0)?);
        let mut rn = (ux_j.0 - y).norm();
        for _ in 0..self.newton.max_iter {
            if rn <= self.newton.tol {
                return Ok(x);
            }
            let Some(step) = self.solve_step(&ux_j.1, &(ux_j.0 - y)) else { break };
            let mut lam = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let xn = x - step * lam;
                if let Ok(cand) = self.u_with_grad(t, &xn) {
                    let rnew = (cand.0 - y).norm();
                    if rnew < rn {
                        x = xn;
                        ux_j = cand;
                        rn = rnew;
                        accepted = true;
                        break;
                    }
                }
                lam *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rn <= 10.0 * self.newton.tol {
            return Ok(x);
        }
        Err(Error::NewtonDivergence { t, y0: y.x, y1: y.y, residual: rn })
    }

    fn lookup_seed(&self, t: f64, y: &Vec2) -> Option<Vec2> {
        let times = &self.ext.field.times;
        let s = match times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i >= times.len() {
                    times.len() - 1
                } else if t - times[i - 1] < times[i] - t {
                    i - 1
                } else {
                    i
                }
            }
        };
        let table = self.lookup[s].get_or_init(|| {
            crate::pde::holder_sample_points(&self.ext, 4096)
                .into_iter()
                .filter_map(|x| self.u(times[s], &x).ok().map(|u| (u, x)))
                .collect()
        });
        table
            .iter()
            .min_by(|a, b| (a.0 - y).norm().partial_cmp(&(b.0 - y).norm()).unwrap())
            .map(|e| e.1)
    }

    /// Preimage anywhere in the reflected tube, without the `G` check.
    pub fn invert_raw(&self, t: f64, y: &Vec2) -> Result<Vec2> {
        let seed = match self.ext.displacement(t, y) {
            Ok(w) => y - w,
            Err(_) => *y,
        };
        let first = self.newton_from(t, y, seed);
        if first.is_ok() {
            return first;
        }
        if let Ok(x) = self.newton_from(t, y, *y) {
            return Ok(x);
        }
        match self.lookup_seed(t, y) {
            Some(s) => self.newton_from(t, y, s),
            None => first,
        }
    }

    /// `u⁻¹(t, y)`, required to land in `G`.
    pub fn invert(&self, t: f64, y: &Vec2) -> Result<Vec2> {
        let x = match self.invert_raw(t, y) {
            Ok(x) => x,
            Err(Error::OutsideTube { .. }) => return Err(Error::OutOfRegion { t, y0: y.x, y1: y.y }),
            Err(e) => return Err(e),
        };
        if !self.in_g(&x) {
            return Err(Error::OutOfRegion { t, y0: y.x, y1: y.y });
        }
        Ok(x)
    }

    /// Signed distance from `u⁻¹(t, y)` to `∂D` (positive inside), or `None`
    /// when `y` has no preimage in the tube, which places it outside `u(t, D̄)`.
    pub fn preimage_depth(&self, t: f64, y: &Vec2) -> Result<Option<f64>> {
        match self.invert_raw(t, y) {
            Ok(x) => Ok(Some(self.ext.domain.signed_distance(&x)?)),
            Err(Error::OutsideTube { .. }) | Err(Error::OutOfRegion { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn random_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.horizon() * rng.random::<f64>()
    }

    /// Determinant sweep over `[0, T₁] × G`.
    pub fn det_check(&self, samples: usize, band: (f64, f64), seed: u64) -> Result<DetReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rep = DetReport { samples, band, min: f64::INFINITY, max: f64::NEG_INFINITY, violations: 0 };
        for _ in 0..samples {
            let t = self.random_time(&mut rng);
            let x = self.ext.domain.sample_g(&mut rng);
            let d = self.jacobian(t, &x)?.determinant();
            rep.min = rep.min.min(d);
            rep.max = rep.max.max(d);
            if !(d >= band.0 && d <= band.1) {
                rep.violations += 1;
            }
        }
        Ok(rep)
    }

    /// Sampled `(M₁, M₂)`: extreme ratios `|u(t,x) − u(t,y)|/|x − y|` over
    /// random pairs in `G`, half of them closer than `δ₀/2`.
    pub fn estimate_bilipschitz(&self, samples: usize, seed: u64) -> Result<BiLipschitz> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d0 = self.delta0();
        let mut out = BiLipschitz { m1: f64::INFINITY, m2: 0.0, close_min: f64::INFINITY, samples };
        let dom = self.ext.domain;
        for k in 0..samples {
            let t = self.random_time(&mut rng);
            let x = dom.sample_g(&mut rng);
            let close = k % 2 == 1;
            let y = if close {
                let mut y;
                loop {
                    let r = 0.5 * d0 * rng.random::<f64>();
                    let dir = if self.dim() == 1 {
                        Vec2::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0)
                    } else {
                        let a = 2.0 * PI * rng.random::<f64>();
                        Vec2::new(a.cos(), a.sin())
                    };
                    y = x + dir * r;
                    if r > 0.0 && self.in_g(&y) {
                        break;
                    }
                }
                y
            } else {
                dom.sample_g(&mut rng)
            };
            let dist = (x - y).norm();
            if dist == 0.0 {
                continue;
            }
            let ratio = (self.u(t, &x)? - self.u(t, &y)?).norm() / dist;
            out.m1 = out.m1.min(ratio);
            out.m2 = out.m2.max(ratio);
            if close {
                out.close_min = out.close_min.min(ratio);
            }
        }
        Ok(out)
    }

    /// Probes the exterior and interior cones at `u(t, x)`, `x ∈ ∂D`.
    pub fn verify_cone_conditions(&self, theta0: f64, delta2: f64, trials: usize, seed: u64) -> Result<ConeReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = self.ext.domain;
        let mut rep = ConeReport { trials, theta0, delta2, violations: 0, worst_margin: f64::INFINITY };
        for _ in 0..trials {
            let t = self.random_time(&mut rng);
            let x = dom.sample_boundary(&mut rng);
            let apex = self.u(t, &x)?;
            let n = dom.boundary_normal(&x);
            for sign in [-1.0, 1.0] {
                let cone = Cone::new(apex, n * sign, theta0, delta2);
                let y = cone.sample(&mut rng, self.dim());
                let depth = self.preimage_depth(t, &y)?;
                // Exterior probes must leave u(t, D̄); interior probes must land in u(t, D).
                let margin = match (sign > 0.0, depth) {
                    (true, Some(d)) => d,
                    (true, None) => -1.0,
                    (false, Some(d)) => -d,
                    (false, None) => f64::INFINITY,
                };
                rep.worst_margin = rep.worst_margin.min(margin);
                if margin <= 0.0 {
                    rep.violations += 1;
                }
            }
        }
        Ok(rep)
    }

    /// Round-trip error `max |u(t, u⁻¹(t, y)) − y|` over images of random points of `G`.
    pub fn round_trip(&self, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let t = self.random_time(&mut rng);
            let x = self.ext.domain.sample_g(&mut rng);
            let y = self.u(t, &x)?;
            let back = self.invert(t, &y)?;
            worst = worst.max((self.u(t, &back)? - y).norm());
        }
        Ok(worst)
    }

    /// Open-mapping probe: balls of radius `radius` around `u(t₀, x₀)` are
    /// covered by `u(t, G)` for `|t − t₀| < eta`. Returns the failure count.
    pub fn open_mapping_probe(&self, centres: usize, probes: usize, radius: f64, eta: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = 0;
        for _ in 0..centres {
            let t0 = self.random_time(&mut rng);
            let x0 = self.ext.domain.sample_interior(&mut rng);
            let c = self.u(t0, &x0)?;
            for _ in 0..probes {
                let t = (t0 + eta * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, self.horizon());
                let off = if self.dim() == 1 {
                    Vec2::new(radius * (2.0 * rng.random::<f64>() - 1.0), 0.0)
                } else {
                    let a = 2.0 * PI * rng.random::<f64>();
                    Vec2::new(a.cos(), a.sin()) * (radius * rng.random::<f64>().sqrt())
                };
                if self.invert(t, &(c + off)).is_err() {
                    failures += 1;
                }
            }
        }
        Ok(failures)
    }

    /// Sandwich check: images of `D̄` stay within `δ₁/2` of `u(t, D)`, i.e.
    /// they invert back into `D̄`. Returns the failure count.
    pub fn sandwich_check(&self, samples: usize, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = 0;
        for _ in 0..samples {
            let t = self.random_time(&mut rng);
            let x = self.ext.domain.sample_interior(&mut rng);
            let y = self.u(t, &x)?;
            match self.invert(t, &y) {
                Ok(back) if self.ext.domain.contains_closed(&back) => {}
                _ => bad += 1,
            }
        }
        Ok(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetReport {
    pub samples: usize,
    pub band: (f64, f64),
    pub min: f64,
    pub max: f64,
    pub violations: usize,
}

impl DetReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLipschitz {
    pub m1: f64,
    pub m2: f64,
    /// Smallest ratio among pairs closer than `δ₀/2`.
    pub close_min: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub trials: usize,
    pub theta0: f64,
    pub delta2: f64,
    pub violations: usize,
    /// Smallest depth of a probe's preimage on the correct side of `∂D`.
    pub worst_margin: f64,
}

impl ConeReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// The moving domain `u(t, D)` and its inner parts `D(t, c)`.
#[derive(Debug, Clone, Copy)]
pub struct TimeDependentDomain<'a> {
    pub transform: &'a ZvonkinTransform,
}

impl<'a> TimeDependentDomain<'a> {
    pub fn new(transform: &'a ZvonkinTransform) -> Self {
        TimeDependentDomain { transform }
    }

    /// `y ∈ u(t, D)`.
    pub fn contains(&self, t: f64, y: &Vec2) -> Result<bool> {
        Ok(self.transform.preimage_depth(t, y)?.is_some_and(|d| d > 0.0))
    }

    /// `y ∈ u(t, D̄)`.
    pub fn contains_closed(&self, t: f64, y: &Vec2) -> Result<bool> {
        Ok(self.transform.preimage_depth(t, y)?.is_some_and(|d| d >= -crate::geometry::TOL_GEO))
    }

    /// Nearest point of `u(t, ∂D)` to `y` and its distance.
    pub fn nearest_image_boundary(&self, t: f64, y: &Vec2) -> Result<(Vec2, f64)> {
        let z = self.transform;
        let dom = z.domain();
        if z.dim() == 1 {
            let mut best = (Vec2::zeros(), f64::INFINITY);
            for s in [0.25, 0.75] {
                let p = z.u(t, &dom.boundary_point(s))?;
                let d = (p - y).norm();
                if d < best.1 {
                    best = (p, d);
                }
            }
            return Ok(best);
        }
        let dist = |s: f64| -> Result<(Vec2, f64)> {
            let p = z.u(t, &dom.boundary_point(s))?;
            Ok((p, (p - y).norm()))
        };
        const N: usize = 256;
        let mut best_k = 0;
        let mut best = dist(0.0)?;
        for k in 1..N {
            let c = dist(k as f64 / N as f64)?;
            if c.1 < best.1 {
                best = c;
                best_k = k;
            }
        }
        // Golden-section refinement on the bracketing cell.
        let (mut a, mut b) = ((best_k as f64 - 1.0) / N as f64, (best_k as f64 + 1.0) / N as f64);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (dist(c)?, dist(d)?);
        for _ in 0..60 {
            if fc.1 < fd.1 {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = dist(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = dist(d)?;
            }
        }
        for cand in [fc, fd] {
            if cand.1 < best.1 {
                best = cand;
            }
        }
        Ok(best)
    }

    /// Signed distance to `u(t, ∂D)`, positive inside `u(t, D)`.
    pub fn depth(&self, t: f64, y: &Vec2) -> Result<f64> {
        let (_, d) = self.nearest_image_boundary(t, y)?;
        Ok(if self.contains(t, y)? { d } else { -d })
    }

    /// `y ∈ D(t, c) = {d(y, u(t, D)^c) > c}`.
    pub fn inner_contains(&self, t: f64, y: &Vec2, c: f64) -> Result<bool> {
        Ok(self.depth(t, y)? > c)
    }
}

/// The four inequalities constraining `θ₁`, as `lhs − rhs` margins.
pub fn theta1_margins(theta0: f64, theta1: f64) -> [f64; 4] {
    theta1_margins_kappa(theta0, theta1, 1.0)
}

/// Margins with `1` replaced by `κ²` under the square roots of the last two
/// inequalities (the first two do not involve `κ`).
pub fn theta1_margins_kappa(theta0: f64, theta1: f64, kappa: f64) -> [f64; 4] {
    let c = theta1.cos();
    let s = (2.0 - 2.0 * c).sqrt();
    let tau = theta1.tan();
    let q = (c - s) / (1.0 + 12.0 * tau) - s;
    let m1 = c * c + q * q - 1.0;
    let m2 = q - (0.5 * theta0).cos();
    let root = (kappa * kappa - 4.0 * tau * tau).max(0.0).sqrt();
    let num3 = root * c - 2.0 * tau - 0.5;
    let den3 = (1.25 + 4.0 * tau * tau + 2.0 * tau - root * c).max(0.0).sqrt();
    let m3 = num3 / den3 - theta0.cos();
    let num4 = root * c - 2.0 * tau + 0.5 * c;
    let den4 = (2.25 + 4.0 * tau * tau + 2.0 * tau).sqrt();
    let m4 = num4 / den4 - theta0.cos();
    [m1, m2, m3, m4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta1 {
    pub theta0: f64,
    pub theta1: f64,
    pub margins: [f64; 4],
    pub scan_points: usize,
}

/// Largest `θ₁ < θ₀/2 ∧ arctan(1/24)` on a uniform scan satisfying all four
/// inequalities (the first two non-strictly, the last two strictly).
pub fn solve_theta1(theta0: f64) -> Result<Theta1> {
    if !(theta0 > 0.0 && theta0 < 0.5 * PI) {
        return Err(Error::InvalidParameter(format!("θ₀ = {theta0} must lie in (0, π/2)")));
    }
    const N: usize = 100_000;
    let cap = (0.5 * theta0).min((1.0f64 / 24.0).atan());
    let ok = |m: &[f64; 4]| m[0] >= 0.0 && m[1] >= 0.0 && m[2] > 0.0 && m[3] > 0.0;
    for k in (1..N).rev() {
        let th = cap * k as f64 / N as f64;
        if th < 1e-6 {
            break;
        }
        let m = theta1_margins(theta0, th);
        if ok(&m) {
            return Ok(Theta1 { theta0, theta1: th, margins: m, scan_points: N });
        }
    }
    Err(Error::NoFeasibleTheta1 { theta0 })
}

/// `κ ∈ (½, 1)`: midpoint between the smallest value keeping the last two
/// inequalities strict at `θ₁` and 1.
pub fn solve_kappa(theta0: f64, theta1: f64) -> Result<f64> {
    let feasible = |k: f64| {
        let m = theta1_margins_kappa(theta0, theta1, k);
        m[2] > 0.0 && m[3] > 0.0
    };
    if !feasible(1.0) {
        return Err(Error::NoFeasibleTheta1 { theta0 });
    }
    let (mut lo, mut hi) = (0.5, 1.0);
    if feasible(lo) {
        return Ok(0.75);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (hi + 1.0))
}

/// Knobs of [`select_t1`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub resolution: Resolution,
    pub det_samples: usize,
    pub det_band: (f64, f64),
    pub bilip_samples: usize,
    pub cone_trials: usize,
    /// Smallest horizon tried is `2^{−min_level}`.
    pub min_level: u32,
    pub seed: u64,
    pub mollify_level: Option<u32>,
    /// Scan the ladder from the smallest horizon upwards.
    pub ascending: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            resolution: Resolution::default(),
            det_samples: 2000,
            det_band: (0.5, 2.0),
            bilip_samples: 2000,
            cone_trials: 2000,
            min_level: 10,
            seed: 0,
            mollify_level: None,
            ascending: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Attempt {
    pub horizon: f64,
    pub det: DetReport,
    pub cone: Option<ConeReport>,
}

/// Outcome of [`select_t1`].
#[derive(Debug, Clone)]
pub struct T1Selection {
    pub t1: f64,
    pub theta0: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Reference cone `(θ, r)` of `D` itself.
    pub reference: (f64, f64),
    pub bilip: BiLipschitz,
    pub det: DetReport,
    pub cone: ConeReport,
    pub holder: HolderFit,
    /// The angle produced by the closed-form recipe from `(M₀, α₀, M₃)`, for
    /// comparison; `NaN` when that recipe is not applicable.
    pub theta0_formula: f64,
    pub attempts: Vec<T1Attempt>,
    pub transform: ZvonkinTransform,
}

/// Builds the transform for a given horizon.
pub fn build_transform(domain: DomainSpec, drift: &DriftField, horizon: f64, opts: &SelectOptions) -> Result<ZvonkinTransform> {
    let mut p = ParabolicProblem::new(domain, drift.clone(), horizon, opts.resolution);
    p.mollify_level = opts.mollify_level;
    p.interpolation = Interpolation::Cubic;
    let sol = solve_neumann_terminal(&p)?;
    Ok(ZvonkinTransform::new(extend_across_boundary(sol.field, domain)))
}

/// Angle ladder tried for `θ₀`.
pub fn theta0_ladder(base: f64) -> Vec<f64> {
    (0..8).map(|k| base * (1.0 - 0.1 * k as f64)).collect()
}

/// Cone radius paired with half-angle `θ`: a chord inside the tangent ball.
pub fn cone_radius(domain: &DomainSpec, theta: f64) -> f64 {
    1.8 * domain.uniform_sphere_radius() * theta.cos()
}

enum Assessment {
    Pass(Box<T1Selection>),
    Fail(T1Attempt),
}

fn assess_horizon(domain: DomainSpec, drift: &DriftField, horizon: f64, opts: &SelectOptions) -> Result<Assessment> {
    let reference = domain.reference_cone();
    let d0 = domain.uniform_sphere_radius();
    let z = build_transform(domain, drift, horizon, opts)?;
    let det = z.det_check(opts.det_samples, opts.det_band, opts.seed ^ 0xd37)?;
    if !det.pass() {
        return Ok(Assessment::Fail(T1Attempt { horizon, det, cone: None }));
    }
    let bilip = z.estimate_bilipschitz(opts.bilip_samples, opts.seed ^ 0xb11)?;
    let delta1 = 0.5 * bilip.m1 * d0;
    let mut last = None;
    for theta in theta0_ladder(reference.0) {
        let delta2 = (0.5 * delta1).min(bilip.m1 * cone_radius(&domain, theta));
        let cone = z.verify_cone_conditions(theta, delta2, opts.cone_trials, opts.seed ^ 0xc0e)?;
        if cone.pass() {
            let holder = holder_estimate(&z.ext, 2048)?;
            let m3 = domain.dim() as f64 * holder.m0;
            let ta = horizon.powf(holder.alpha0);
            let arg = (reference.0.cos() + domain.dim() as f64 * holder.m0 * ta) / (1.0 - m3 * ta);
            let theta0_formula = if arg > 0.0 && arg < 1.0 { arg.acos() } else { f64::NAN };
            return Ok(Assessment::Pass(Box::new(T1Selection {
                t1: horizon,
                theta0: theta,
                delta0: d0,
                delta1,
                delta2,
                reference,
                bilip,
                det: det.clone(),
                cone: cone.clone(),
                holder,
                theta0_formula,
                attempts: vec![T1Attempt { horizon, det, cone: Some(cone) }],
                transform: z,
            })));
        }
        last = Some(cone);
    }
    Ok(Assessment::Fail(T1Attempt { horizon, det, cone: last }))
}

/// Runs the selection checks at a single horizon; errors when it fails.
pub fn assess_at(domain: DomainSpec, drift: &DriftField, horizon: f64, opts: &SelectOptions) -> Result<T1Selection> {
    match assess_horizon(domain, drift, horizon, opts)? {
        Assessment::Pass(s) => Ok(*s),
        Assessment::Fail(a) => Err(Error::NoAdmissibleT(format!(
            "horizon {horizon}: det in [{:.4}, {:.4}] with {} violations{}",
            a.det.min,
            a.det.max,
            a.det.violations,
            a.cone.map(|c| format!(", {} cone violations", c.violations)).unwrap_or_default()
        ))),
    }
}

/// Picks `T₁` on the dyadic ladder `1, ½, …, 2^{−min_level}`: a horizon
/// passes when its transform satisfies the determinant band and admits a cone
/// angle from the ladder with zero cone violations.
///
/// Descending (the default) keeps the first passing horizon from the top.
/// Ascending starts at the bottom and keeps the last horizon before the first
/// failure, which avoids the costly long-horizon solves when `T₁` is small.
pub fn select_t1(domain: DomainSpec, drift: &DriftField, opts: &SelectOptions) -> Result<T1Selection> {
    let mut attempts = Vec::new();
    let horizon = |level: u32| 0.5f64.powi(level as i32);
    if opts.ascending {
        let mut best: Option<Box<T1Selection>> = None;
        for level in (0..=opts.min_level).rev() {
            match assess_horizon(domain, drift, horizon(level), opts)? {
                Assessment::Pass(mut s) => {
                    attempts.append(&mut s.attempts);
                    best = Some(s);
                }
                Assessment::Fail(a) => {
                    attempts.push(a);
                    break;
                }
            }
        }
        return match best {
            Some(mut s) => {
                s.attempts = attempts;
                Ok(*s)
            }
            None => Err(Error::NoAdmissibleT(format!("smallest horizon 2^-{} failed", opts.min_level))),
        };
    }
    for level in 0..=opts.min_level {
        match assess_horizon(domain, drift, horizon(level), opts)? {
            Assessment::Pass(mut s) => {
                attempts.append(&mut s.attempts);
                s.attempts = attempts;
                return Ok(*s);
            }
            Assessment::Fail(a) => attempts.push(a),
        }
    }
    Err(Error::NoAdmissibleT(format!("{} horizons tried down to 2^-{}", attempts.len(), opts.min_level)))
}

impl T1Selection {
    /// Records `T₁, θ₀, δ₀, δ₁, δ₂, M₀, α₀, M₁, M₂, M₃` in the ledger.
    pub fn write_ledger(&self, ledger: &mut ConstantsLedger) {
        let d = self.transform.dim() as f64;
        ledger.set("T1", self.t1, Provenance::Verified, "largest dyadic horizon passing the determinant and cone checks");
        ledger.set("theta0", self.theta0, Provenance::Verified, "largest ladder angle with zero cone violations");
        ledger.set("delta0", self.delta0, Provenance::Assumed, "uniform sphere radius of the preset");
        ledger.set("delta1", self.delta1, Provenance::Fitted, "M1*delta0/2");
        ledger.set("delta2", self.delta2, Provenance::Verified, "delta1/2 ∧ M1*r");
        ledger.set("M0", self.holder.m0, Provenance::Fitted, "time Hölder constant of u and ∇u");
        ledger.set("alpha0", self.holder.alpha0, Provenance::Fitted, "time Hölder exponent");
        ledger.set("M1", self.bilip.m1, Provenance::Fitted, "sampled lower bi-Lipschitz ratio");
        ledger.set("M2", self.bilip.m2, Provenance::Fitted, "sampled upper bi-Lipschitz ratio");
        ledger.set("M3", d * self.holder.m0, Provenance::Fitted, "d*M0");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transform(dom: DomainSpec, drift: DriftField, horizon: f64, h: f64) -> ZvonkinTransform {
        let opts = SelectOptions { resolution: Resolution::new(h * h * 4.0, h), ..Default::default() };
        build_transform(dom, &drift, horizon, &opts).unwrap()
    }

    #[test]
    fn identity_and_translation_invert_exactly() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let z = transform(dom, DriftField::zero(2), 1.0, 1.0 / 16.0);
        let y = Vec2::new(0.3, -0.2);
        assert!((z.invert(0.4, &y).unwrap() - y).norm() < 1e-12);
        assert!((z.jacobian(0.4, &y).unwrap() - Mat2::identity()).norm() < 1e-8);
        let c = Vec2::new(0.5, 0.25);
        let z = transform(dom, DriftField::constant(c, 2), 1.0, 1.0 / 16.0);
        let x = z.invert(0.25, &y).unwrap();
        assert!((x - (y - 0.75 * c)).norm() < 1e-9);
        let bl = z.estimate_bilipschitz(500, 1).unwrap();
        assert!((bl.m1 - 1.0).abs() < 1e-6 && (bl.m2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sign_drift_round_trip() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let z = transform(dom, DriftField::sign1d(2.0, 0.5, 1), 0.25, 1.0 / 64.0);
        assert!(z.round_trip(1000, 3).unwrap() <= 1e-8);
        assert_eq!(z.sandwich_check(500, 4).unwrap(), 0);
        assert_eq!(z.open_mapping_probe(20, 20, 1.0 / 64.0, 1e-3, 5).unwrap(), 0);
    }

    #[test]
    fn terminal_slice_is_the_identity() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let z = transform(dom, DriftField::sign1d(2.0, 0.5, 1), 0.25, 1.0 / 32.0);
        let td = TimeDependentDomain::new(&z);
        for k in 0..50 {
            let y = Vec2::new(-0.2 + 1.4 * k as f64 / 49.0, 0.0);
            assert_eq!(td.contains(0.25, &y).unwrap(), dom.contains(&y));
        }
    }

    #[test]
    fn cone_apex_is_excluded() {
        let cone = Cone::new(Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0), 0.5, 0.2);
        assert!(!cone.contains(&Vec2::new(1.0, 0.0)));
    }

    #[test]
    fn identity_cones_pass() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let z = transform(dom, DriftField::zero(2), 1.0, 1.0 / 16.0);
        let (theta, r) = dom.reference_cone();
        let rep = z.verify_cone_conditions(theta, r.min(0.25), 500, 9).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn theta1_scan_matches_brute_force() {
        for theta0 in [PI / 6.0, PI / 4.0, PI / 3.0] {
            let th = solve_theta1(theta0).unwrap();
            let m = theta1_margins(theta0, th.theta1);
            assert!(m[0] >= 0.0 && m[1] >= 0.0 && m[2] > 0.0 && m[3] > 0.0);
            let cap = (0.5 * theta0).min((1.0f64 / 24.0).atan());
            // The next scan point up is infeasible (unless the cap is reached).
            let next = th.theta1 + cap / 1e5;
            if next < cap {
                let mn = theta1_margins(theta0, next);
                assert!(!(mn[0] >= 0.0 && mn[1] >= 0.0 && mn[2] > 0.0 && mn[3] > 0.0));
            }
            assert!(m[1] + (0.5 * theta0).cos() >= (0.5 * theta0).cos());
        }
        let th = solve_theta1(PI / 2.01).unwrap();
        assert!(th.theta1 < (1.0f64 / 24.0).atan());
    }

    #[test]
    fn kappa_lies_in_range() {
        let th = solve_theta1(PI / 3.0).unwrap();
        let k = solve_kappa(PI / 3.0, th.theta1).unwrap();
        assert!(k > 0.5 && k < 1.0);
        let m = theta1_margins_kappa(PI / 3.0, th.theta1, k);
        assert!(m[2] > 0.0 && m[3] > 0.0);
    }

    #[test]
    fn select_t1_on_forced_cases() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 256.0, 1.0 / 32.0), det_samples: 300, cone_trials: 300, bilip_samples: 300, ..Default::default() };
        let s = select_t1(dom, &DriftField::zero(1), &opts).unwrap();
        assert_eq!(s.t1, 1.0);
        let s = select_t1(dom, &DriftField::constant(Vec2::new(1.0, 0.0), 1), &opts).unwrap();
        assert_eq!(s.t1, 1.0);
        let mut ledger = ConstantsLedger::new();
        s.write_ledger(&mut ledger);
        ledger.check_invariants().unwrap();
    }

    #[test]
    fn ascending_scan_agrees_on_sign_drift() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let opts = SelectOptions { resolution: Resolution::new(1.0 / 256.0, 1.0 / 32.0), det_samples: 300, cone_trials: 300, bilip_samples: 300, ..Default::default() };
        let drift = DriftField::sign1d(2.0, 0.5, 1);
        let down = select_t1(dom, &drift, &opts).unwrap();
        let up = select_t1(dom, &drift, &SelectOptions { ascending: true, ..opts }).unwrap();
        assert_eq!(down.t1, up.t1);
        assert!(down.t1 < 1.0);
        assert_eq!(up.attempts.last().unwrap().cone, None);
    }
}
