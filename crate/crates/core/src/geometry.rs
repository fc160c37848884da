//! Preset domains and the boundary geometry used everywhere else.
//!
//! A domain is `D = {F > 0}` for an analytic level function `F`. On a tube of
//! width `δ₀` (the uniform sphere radius) every point has a unique nearest
//! boundary point `φ(x)`, which is what makes the normal extension, the
//! reflection across the boundary and the projection scheme well defined.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::smooth::cutoff;
use crate::{Error, Mat2, Result, Vec2};

/// Geometric tolerance for presets.
pub const TOL_GEO: f64 = 1e-10;

/// A preset `C^∞` bounded domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum DomainSpec {
    /// The open interval `(a, b)`.
    Interval { a: f64, b: f64 },
    /// The open disk of radius `radius` centred at the origin.
    Disk { radius: f64 },
    /// The ellipse `x²/a² + y²/b² < 1`.
    Ellipse { a: f64, b: f64 },
}

impl DomainSpec {
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidParameter(format!("interval needs a < b, got ({a}, {b})")));
        }
        Ok(DomainSpec::Interval { a, b })
    }

    pub fn disk(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter(format!("disk radius must be positive, got {radius}")));
        }
        Ok(DomainSpec::Disk { radius })
    }

    pub fn ellipse(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
            return Err(Error::InvalidParameter(format!("ellipse semi-axes must be positive, got ({a}, {b})")));
        }
        Ok(DomainSpec::Ellipse { a, b })
    }

    /// Builds a preset from its config name and parameter list.
    pub fn from_preset(name: &str, params: &[f64]) -> Result<Self> {
        match (name, params) {
            ("interval", [a, b]) => Self::interval(*a, *b),
            ("disk", [r]) => Self::disk(*r),
            ("ellipse", [a, b]) => Self::ellipse(*a, *b),
            ("interval" | "disk" | "ellipse", _) => Err(Error::InvalidParameter(format!(
                "wrong number of parameters for `{name}`: {params:?}"
            ))),
            _ => Err(Error::InvalidParameter(format!("unknown domain preset `{name}`"))),
        }
    }

    pub fn preset_name(&self) -> &'static str {
        match self {
            DomainSpec::Interval { .. } => "interval",
            DomainSpec::Disk { .. } => "disk",
            DomainSpec::Ellipse { .. } => "ellipse",
        }
    }

    /// Spatial dimension `d`.
    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            _ => 2,
        }
    }

    /// Level function `F`, positive inside.
    pub fn level(&self, x: &Vec2) -> f64 {
        match *self {
            DomainSpec::Interval { a, b } => (x.x - a) * (b - x.x) / (b - a),
            DomainSpec::Disk { radius } => radius - x.norm(),
            DomainSpec::Ellipse { a, b } => 1.0 - (x.x * x.x / (a * a) + x.y * x.y / (b * b)),
        }
    }

    /// Gradient of [`level`](Self::level).
    pub fn level_grad(&self, x: &Vec2) -> Vec2 {
        match *self {
            DomainSpec::Interval { a, b } => Vec2::new((a + b - 2.0 * x.x) / (b - a), 0.0),
            DomainSpec::Disk { .. } => {
                let r = x.norm();
                if r == 0.0 {
                    Vec2::zeros()
                } else {
                    -x / r
                }
            }
            DomainSpec::Ellipse { a, b } => Vec2::new(-2.0 * x.x / (a * a), -2.0 * x.y / (b * b)),
        }
    }

    /// Hessian of [`level`](Self::level).
    pub fn level_hess(&self, x: &Vec2) -> Mat2 {
        match *self {
            DomainSpec::Interval { a, b } => Mat2::new(-2.0 / (b - a), 0.0, 0.0, 0.0),
            DomainSpec::Disk { .. } => {
                let r = x.norm();
                if r == 0.0 {
                    return Mat2::zeros();
                }
                -(Mat2::identity() - x * x.transpose() / (r * r)) / r
            }
            DomainSpec::Ellipse { a, b } => Mat2::new(-2.0 / (a * a), 0.0, 0.0, -2.0 / (b * b)),
        }
    }

    /// Whether `x ∈ D` (open).
    pub fn contains(&self, x: &Vec2) -> bool {
        self.level(x) > 0.0
    }

    /// Whether `x ∈ D̄` up to `TOL_GEO`.
    pub fn contains_closed(&self, x: &Vec2) -> bool {
        self.level(x) >= -TOL_GEO
    }

    /// Uniform interior/exterior sphere radius `δ₀`.
    pub fn uniform_sphere_radius(&self) -> f64 {
        match *self {
            DomainSpec::Interval { a, b } => 0.5 * (b - a),
            DomainSpec::Disk { radius } => radius,
            DomainSpec::Ellipse { a, b } => {
                let (big, small) = if a >= b { (a, b) } else { (b, a) };
                small * small / big
            }
        }
    }

    /// Axis-aligned box `[lo, hi]` containing `Ḡ' = {d(x, D) ≤ δ₀}`.
    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let d0 = self.uniform_sphere_radius();
        match *self {
            DomainSpec::Interval { a, b } => (Vec2::new(a - d0, 0.0), Vec2::new(b + d0, 0.0)),
            DomainSpec::Disk { radius } => {
                let r = radius + d0;
                (Vec2::new(-r, -r), Vec2::new(r, r))
            }
            DomainSpec::Ellipse { a, b } => (Vec2::new(-a - d0, -b - d0), Vec2::new(a + d0, b + d0)),
        }
    }

    /// Lebesgue measure of `D`.
    pub fn volume(&self) -> f64 {
        match *self {
            DomainSpec::Interval { a, b } => b - a,
            DomainSpec::Disk { radius } => PI * radius * radius,
            DomainSpec::Ellipse { a, b } => PI * a * b,
        }
    }

    /// Nearest boundary point, without the tube check.
    pub fn nearest_boundary_point(&self, x: &Vec2) -> Result<Vec2> {
        match *self {
            DomainSpec::Interval { a, b } => {
                Ok(Vec2::new(if x.x - a <= b - x.x { a } else { b }, 0.0))
            }
            DomainSpec::Disk { radius } => {
                let r = x.norm();
                if r == 0.0 {
                    return Err(Error::OutsideTube { distance: radius, width: radius });
                }
                Ok(x * (radius / r))
            }
            DomainSpec::Ellipse { a, b } => ellipse_nearest(a, b, x).map(|(p, _)| p),
        }
    }

    /// Signed distance to `∂D`, positive inside.
    pub fn signed_distance(&self, x: &Vec2) -> Result<f64> {
        match *self {
            DomainSpec::Interval { a, b } => Ok((x.x - a).min(b - x.x)),
            DomainSpec::Disk { radius } => Ok(radius - x.norm()),
            DomainSpec::Ellipse { a, b } => {
                let (p, _) = ellipse_nearest(a, b, x)?;
                let d = (x - p).norm();
                Ok(if self.level(x) >= 0.0 { d } else { -d })
            }
        }
    }

    /// Distance from `x` to `D̄` (zero inside).
    pub fn distance_to_domain(&self, x: &Vec2) -> Result<f64> {
        Ok((-self.signed_distance(x)?).max(0.0))
    }

    /// The nearest-point map `φ(x)`, defined on the tube `Γ_{δ₀}`.
    pub fn project_to_boundary(&self, x: &Vec2) -> Result<Vec2> {
        let d0 = self.uniform_sphere_radius();
        let sd = self.signed_distance(x)?;
        if sd.abs() >= d0 {
            return Err(Error::OutsideTube { distance: sd.abs(), width: d0 });
        }
        self.nearest_boundary_point(x)
    }

    /// Unit inward normal at a boundary point.
    pub fn boundary_normal(&self, p: &Vec2) -> Vec2 {
        let g = self.level_grad(p);
        let n = g.norm();
        if n == 0.0 {
            Vec2::zeros()
        } else {
            g / n
        }
    }

    /// Extended inward normal `n(φ(x))·bump(x)`.
    ///
    /// The bump is 1 on `Γ_{δ₀/2}` and vanishes outside `Γ_{δ₀}`.
    pub fn inward_normal_extended(&self, x: &Vec2) -> Vec2 {
        let d0 = self.uniform_sphere_radius();
        let sd = match self.signed_distance(x) {
            Ok(v) => v,
            Err(_) => return Vec2::zeros(),
        };
        let d = sd.abs();
        if d >= d0 {
            return Vec2::zeros();
        }
        let w = cutoff(d, 0.5 * d0, d0);
        match self.nearest_boundary_point(x) {
            Ok(p) => self.boundary_normal(&p) * w,
            Err(_) => Vec2::zeros(),
        }
    }

    /// Central-difference Jacobian of the extended normal, `J[(j, k)] = ∂_k n^j`.
    pub fn normal_jacobian(&self, x: &Vec2) -> Mat2 {
        let h = 1e-6 * self.uniform_sphere_radius();
        let mut j = Mat2::zeros();
        for k in 0..self.dim() {
            let mut e = Vec2::zeros();
            e[k] = h;
            let col = (self.inward_normal_extended(&(x + e)) - self.inward_normal_extended(&(x - e))) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    /// Componentwise Laplacian of the extended normal.
    pub fn normal_laplacian(&self, x: &Vec2) -> Vec2 {
        let h = 1e-4 * self.uniform_sphere_radius();
        let c = self.inward_normal_extended(x);
        let mut lap = Vec2::zeros();
        for k in 0..self.dim() {
            let mut e = Vec2::zeros();
            e[k] = h;
            lap += (self.inward_normal_extended(&(x + e)) - 2.0 * c + self.inward_normal_extended(&(x - e))) / (h * h);
        }
        lap
    }

    /// Boundary point for parameter `s ∈ [0, 1)`.
    ///
    /// For the interval `s < ½` gives `a` and `s ≥ ½` gives `b`.
    pub fn boundary_point(&self, s: f64) -> Vec2 {
        let s = s.rem_euclid(1.0);
        match *self {
            DomainSpec::Interval { a, b } => Vec2::new(if s < 0.5 { a } else { b }, 0.0),
            DomainSpec::Disk { radius } => {
                let th = TAU * s;
                Vec2::new(radius * th.cos(), radius * th.sin())
            }
            DomainSpec::Ellipse { a, b } => {
                let th = TAU * s;
                Vec2::new(a * th.cos(), b * th.sin())
            }
        }
    }

    /// Parameter of a boundary point (inverse of [`boundary_point`](Self::boundary_point)).
    pub fn boundary_param(&self, p: &Vec2) -> f64 {
        match *self {
            DomainSpec::Interval { a, b } => {
                if (p.x - a).abs() <= (p.x - b).abs() {
                    0.25
                } else {
                    0.75
                }
            }
            DomainSpec::Disk { .. } => (p.y.atan2(p.x) / TAU).rem_euclid(1.0),
            DomainSpec::Ellipse { a, b } => ((p.y / b).atan2(p.x / a) / TAU).rem_euclid(1.0),
        }
    }

    /// Derivative of [`boundary_point`](Self::boundary_point) in `s` (zero in 1-D).
    pub fn boundary_tangent(&self, s: f64) -> Vec2 {
        let th = TAU * s;
        match *self {
            DomainSpec::Interval { .. } => Vec2::zeros(),
            DomainSpec::Disk { radius } => Vec2::new(-radius * th.sin(), radius * th.cos()) * TAU,
            DomainSpec::Ellipse { a, b } => Vec2::new(-a * th.sin(), b * th.cos()) * TAU,
        }
    }

    /// Perimeter of `∂D` (number of points in 1-D).
    pub fn boundary_measure(&self) -> f64 {
        match *self {
            DomainSpec::Interval { .. } => 2.0,
            DomainSpec::Disk { radius } => TAU * radius,
            DomainSpec::Ellipse { a, b } => {
                // Ramanujan II; only used for sampling densities.
                let h = ((a - b) / (a + b)).powi(2);
                PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
            }
        }
    }

    /// Uniformly random point of the bounding box.
    pub fn sample_box<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let (lo, hi) = self.bounding_box();
        let x = lo.x + (hi.x - lo.x) * rng.random::<f64>();
        let y = if self.dim() == 1 { 0.0 } else { lo.y + (hi.y - lo.y) * rng.random::<f64>() };
        Vec2::new(x, y)
    }

    /// Rejection sample from the box restricted to `accept`.
    pub fn sample_where<R, F>(&self, rng: &mut R, mut accept: F) -> Vec2
    where
        R: Rng + ?Sized,
        F: FnMut(&Vec2) -> bool,
    {
        loop {
            let x = self.sample_box(rng);
            if accept(&x) {
                return x;
            }
        }
    }

    /// Uniform point of `D̄`.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        self.sample_where(rng, |x| self.contains_closed(x))
    }

    /// Uniform point of `G = {d(x, D) < δ₀/2}`.
    pub fn sample_g<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let half = 0.5 * self.uniform_sphere_radius();
        self.sample_where(rng, |x| self.distance_to_domain(x).map(|d| d < half).unwrap_or(false))
    }

    /// Random boundary point (uniform in parameter).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        self.boundary_point(rng.random::<f64>())
    }

    /// The tube `Γ_c`.
    pub fn tube(&self, width: f64) -> TubeNeighborhood {
        TubeNeighborhood { width, parent: *self }
    }

    /// Reference cone `(θ, r)` for `D` itself.
    ///
    /// Tries half-angles `5π/12, π/3, π/4, π/6` with radius `1.8·δ₀·cos θ`
    /// (inside the tangent ball of radius `δ₀`) and keeps the first for which
    /// deterministic probes find no interior or exterior violation.
    pub fn reference_cone(&self) -> (f64, f64) {
        let d0 = self.uniform_sphere_radius();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
        let candidates = [5.0 * PI / 12.0, PI / 3.0, PI / 4.0, PI / 6.0];
        for &theta in &candidates {
            let radius = 1.8 * d0 * theta.cos();
            let mut ok = true;
            'outer: for _ in 0..256 {
                let x = self.sample_boundary(&mut rng);
                let n = self.boundary_normal(&x);
                for sign in [1.0, -1.0] {
                    let cone = Cone::new(x, n * sign, theta, radius);
                    for _ in 0..32 {
                        let y = cone.sample(&mut rng, self.dim());
                        let inside = self.contains(&y);
                        if (sign > 0.0 && !inside) || (sign < 0.0 && self.contains_closed(&y)) {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if ok {
                return (theta, radius);
            }
        }
        let theta = PI / 12.0;
        (theta, 0.5 * d0 * theta.cos())
    }
}

/// Nearest point on the ellipse `x²/a² + y²/b² = 1` and its angle parameter.
///
/// Works in the first quadrant: coarse scan for the global minimiser, then a
/// safeguarded Newton iteration on the stationarity condition.
fn ellipse_nearest(a: f64, b: f64, x: &Vec2) -> Result<(Vec2, f64)> {
    let sx = if x.x < 0.0 { -1.0 } else { 1.0 };
    let sy = if x.y < 0.0 { -1.0 } else { 1.0 };
    let (x0, y0) = (x.x.abs(), x.y.abs());
    let dist2 = |th: f64| (a * th.cos() - x0).powi(2) + (b * th.sin() - y0).powi(2);
    let g = |th: f64| {
        let (s, c) = th.sin_cos();
        -(a * a - b * b) * s * c + a * x0 * s - b * y0 * c
    };
    let dg = |th: f64| {
        let (s, c) = th.sin_cos();
        -(a * a - b * b) * (c * c - s * s) + a * x0 * c + b * y0 * s
    };
    const N: usize = 64;
    let step = 0.5 * PI / N as f64;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..=N {
        let d = dist2(k as f64 * step);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    let mut lo = (best.saturating_sub(1)) as f64 * step;
    let mut hi = ((best + 1).min(N)) as f64 * step;
    let theta;
    let (glo, ghi) = (g(lo), g(hi));
    if glo > 0.0 || ghi < 0.0 {
        // No sign change: the minimiser sits at an end of the quarter arc.
        theta = best as f64 * step;
    } else {
        let mut th = best as f64 * step;
        let mut converged = false;
        for _ in 0..200 {
            let gv = g(th);
            if gv == 0.0 {
                converged = true;
                break;
            }
            if gv < 0.0 {
                lo = th;
            } else {
                hi = th;
            }
            let d = dg(th);
            let mut next = if d > 0.0 { th - gv / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - th).abs() <= 1e-15 * (1.0 + th.abs()) || hi - lo <= 1e-15 {
                th = next;
                converged = true;
                break;
            }
            th = next;
        }
        if !converged {
            return Err(Error::NonConvergence(format!("ellipse nearest point for ({}, {})", x.x, x.y)));
        }
        theta = th;
    }
    let p = Vec2::new(sx * a * theta.cos(), sy * b * theta.sin());
    let full = (sy * theta.sin()).atan2(sx * theta.cos());
    Ok((p, full))
}

/// The cone `C(apex, axis, θ, r) = {y : 0 < |y − apex| < r, (y − apex)·axis > cos θ |y − apex|}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub apex: Vec2,
    pub axis: Vec2,
    pub half_angle: f64,
    pub radius: f64,
}

impl Cone {
    /// Builds a cone; `axis` is normalised.
    pub fn new(apex: Vec2, axis: Vec2, half_angle: f64, radius: f64) -> Self {
        let n = axis.norm();
        let axis = if n > 0.0 { axis / n } else { axis };
        Cone { apex, axis, half_angle, radius }
    }

    pub fn contains(&self, y: &Vec2) -> bool {
        let v = y - self.apex;
        let r = v.norm();
        r > 0.0 && r < self.radius && v.dot(&self.axis) > self.half_angle.cos() * r
    }

    /// A random point of the cone (uniform in angle and radius, not in area).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Vec2 {
        let r = self.radius * (1e-3 + (1.0 - 2e-3) * rng.random::<f64>());
        if dim == 1 {
            return self.apex + self.axis * r;
        }
        let phi = self.half_angle * (2.0 * rng.random::<f64>() - 1.0) * (1.0 - 1e-9);
        let (s, c) = phi.sin_cos();
        let dir = Vec2::new(c * self.axis.x - s * self.axis.y, s * self.axis.x + c * self.axis.y);
        self.apex + dir * r
    }
}

/// The tube `Γ_c = {x : d(x, ∂D) < c}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeNeighborhood {
    pub width: f64,
    pub parent: DomainSpec,
}

impl TubeNeighborhood {
    pub fn contains(&self, x: &Vec2) -> bool {
        self.parent.signed_distance(x).map(|d| d.abs() < self.width).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn disk() -> DomainSpec {
        DomainSpec::disk(1.0).unwrap()
    }

    #[test]
    fn disk_closed_forms() {
        let d = disk();
        assert_abs_diff_eq!(d.signed_distance(&Vec2::new(0.25, 0.0)).unwrap(), 0.75);
        assert_eq!(d.signed_distance(&Vec2::new(1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(d.project_to_boundary(&Vec2::new(0.5, 0.0)).unwrap(), Vec2::new(1.0, 0.0));
        assert_eq!(d.inward_normal_extended(&Vec2::new(1.0, 0.0)), Vec2::new(-1.0, 0.0));
        assert_eq!(d.inward_normal_extended(&Vec2::zeros()), Vec2::zeros());
        assert_eq!(d.uniform_sphere_radius(), 1.0);
        assert!(d.project_to_boundary(&Vec2::zeros()).is_err());
    }

    #[test]
    fn interval_closed_forms() {
        let d = DomainSpec::interval(0.0, 1.0).unwrap();
        assert_eq!(d.project_to_boundary(&Vec2::new(0.1, 0.0)).unwrap(), Vec2::new(0.0, 0.0));
        assert_eq!(d.inward_normal_extended(&Vec2::new(0.0, 0.0)).x, 1.0);
        assert_eq!(d.inward_normal_extended(&Vec2::new(1.0, 0.0)).x, -1.0);
        assert_eq!(d.uniform_sphere_radius(), 0.5);
        assert!(matches!(
            d.project_to_boundary(&Vec2::new(0.5, 0.0)),
            Err(Error::OutsideTube { .. })
        ));
    }

    #[test]
    fn level_functions_match_closed_forms() {
        let d = disk();
        let x = Vec2::new(0.3, -0.4);
        assert_abs_diff_eq!(d.level(&x), 0.5, epsilon = 1e-15);
        let e = DomainSpec::ellipse(2.0, 1.0).unwrap();
        assert_abs_diff_eq!(e.level(&Vec2::new(2.0, 0.0)), 0.0);
        // Finite-difference check of analytic derivatives.
        for dom in [d, e, DomainSpec::interval(0.0, 1.0).unwrap()] {
            let x = if dom.dim() == 1 { Vec2::new(0.3, 0.0) } else { Vec2::new(0.3, -0.4) };
            let h = 1e-6;
            for k in 0..dom.dim() {
                let mut ek = Vec2::zeros();
                ek[k] = h;
                let fd = (dom.level(&(x + ek)) - dom.level(&(x - ek))) / (2.0 * h);
                assert!((fd - dom.level_grad(&x)[k]).abs() < 1e-8);
                let fdg = (dom.level_grad(&(x + ek)) - dom.level_grad(&(x - ek))) / (2.0 * h);
                for j in 0..dom.dim() {
                    assert!((fdg[j] - dom.level_hess(&x)[(j, k)]).abs() < 1e-6);
                }
            }
        }
    }

    fn brute_force_distance(e: &DomainSpec, x: &Vec2, n: usize) -> (f64, Vec2) {
        let mut best = (f64::INFINITY, Vec2::zeros());
        for k in 0..n {
            let p = e.boundary_point(k as f64 / n as f64);
            let d = (p - x).norm();
            if d < best.0 {
                best = (d, p);
            }
        }
        best
    }

    #[test]
    fn ellipse_distance_matches_dense_sampling() {
        let e = DomainSpec::ellipse(2.0, 1.0).unwrap();
        let x = Vec2::new(0.0, 0.5);
        let (oracle, _) = brute_force_distance(&e, &x, 1_000_000);
        let sd = e.signed_distance(&x).unwrap();
        assert!(sd > 0.0);
        assert!((sd - oracle).abs() < 1e-9, "{sd} vs {oracle}");

        let x = Vec2::new(1.8, 0.2);
        let (oracle, p_oracle) = brute_force_distance(&e, &x, 1_000_000);
        let p = e.project_to_boundary(&x).unwrap();
        assert!(e.level(&p).abs() <= TOL_GEO);
        assert!(((p - x).norm() - oracle).abs() < 1e-9);
        assert!((p - p_oracle).norm() < 1e-4);
    }

    #[test]
    fn ellipse_curvature_radius() {
        let e = DomainSpec::ellipse(2.0, 1.0).unwrap();
        assert_abs_diff_eq!(e.uniform_sphere_radius(), 0.5);
        // Osculating radius from sampled curvature of the parameterisation.
        let mut min_r = f64::INFINITY;
        for k in 0..10_000 {
            let t = TAU * k as f64 / 10_000.0;
            let (s, c) = t.sin_cos();
            let (dx, dy) = (-2.0 * s, c);
            let (ddx, ddy) = (-2.0 * c, -s);
            let r = (dx * dx + dy * dy).powf(1.5) / (dx * ddy - dy * ddx).abs();
            min_r = min_r.min(r);
        }
        assert!((min_r - 0.5).abs() < 1e-6);
    }

    #[test]
    fn projection_distance_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dom in [disk(), DomainSpec::ellipse(2.0, 1.0).unwrap(), DomainSpec::interval(0.0, 1.0).unwrap()] {
            let half = 0.5 * dom.uniform_sphere_radius();
            for _ in 0..1000 {
                let x = dom.sample_where(&mut rng, |x| dom.signed_distance(x).unwrap().abs() < half);
                let p = dom.project_to_boundary(&x).unwrap();
                let sd = dom.signed_distance(&x).unwrap();
                assert!(((x - p).norm() - sd.abs()).abs() <= TOL_GEO);
            }
        }
    }

    #[test]
    fn normal_jacobian_is_symmetric_off_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dom in [disk(), DomainSpec::ellipse(2.0, 1.0).unwrap()] {
            let d0 = dom.uniform_sphere_radius();
            for _ in 0..200 {
                let x = dom.sample_where(&mut rng, |x| {
                    let d = dom.signed_distance(x).unwrap().abs();
                    d > 0.05 * d0 && d < 0.9 * d0
                });
                let j = dom.normal_jacobian(&x);
                assert!((j[(0, 1)] - j[(1, 0)]).abs() < 1e-4, "{j}");
            }
        }
    }

    #[test]
    fn normal_extension_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dom = DomainSpec::ellipse(2.0, 1.0).unwrap();
        let d0 = dom.uniform_sphere_radius();
        for _ in 0..2000 {
            let x = dom.sample_box(&mut rng);
            let n = dom.inward_normal_extended(&x).norm();
            assert!(n <= 1.0 + 1e-12);
            let d = dom.signed_distance(&x).unwrap().abs();
            if d < 0.5 * d0 {
                assert!((n - 1.0).abs() < 1e-12);
            }
            if d >= d0 {
                assert_eq!(n, 0.0);
            }
        }
    }

    #[test]
    fn cone_examples() {
        let c = Cone::new(Vec2::zeros(), Vec2::new(1.0, 0.0), PI / 4.0, 1.0);
        assert!(c.contains(&Vec2::new(0.5, 0.0)));
        assert!(!c.contains(&Vec2::zeros()));
        let y = Vec2::new(0.5, 0.6);
        assert!((0.6f64).atan2(0.5) > PI / 4.0);
        assert!(!c.contains(&y));
    }

    #[test]
    fn cone_agrees_with_direct_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let apex = Vec2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let ang: f64 = TAU * rng.random::<f64>();
            let axis = Vec2::new(ang.cos(), ang.sin());
            let theta = 0.01 + 1.5 * rng.random::<f64>();
            let r = 0.1 + rng.random::<f64>();
            let c = Cone::new(apex, axis, theta, r);
            let y = Vec2::new(2.0 * rng.random::<f64>() - 1.0, 2.0 * rng.random::<f64>() - 1.0);
            let v = y - apex;
            let direct = v.norm() > 0.0 && v.norm() < r && v.dot(&c.axis) > theta.cos() * v.norm();
            assert_eq!(c.contains(&y), direct);
        }
    }

    #[test]
    fn reference_cone_passes_for_presets() {
        let (theta, r) = disk().reference_cone();
        assert!((theta - 5.0 * PI / 12.0).abs() < 1e-12);
        assert!(r > 0.0 && r < 2.0 * theta.cos());
        let (theta, _) = DomainSpec::interval(0.0, 1.0).unwrap().reference_cone();
        assert!(theta > 0.0 && theta < PI / 2.0);
    }

    #[test]
    fn tube_membership() {
        let t = disk().tube(0.25);
        assert!(t.contains(&Vec2::new(0.8, 0.0)));
        assert!(t.contains(&Vec2::new(1.2, 0.0)));
        assert!(!t.contains(&Vec2::new(0.5, 0.0)));
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(DomainSpec::from_preset("disk", &[1.0]).unwrap(), disk());
        assert!(DomainSpec::from_preset("disk", &[1.0, 2.0]).is_err());
        assert!(DomainSpec::from_preset("torus", &[1.0]).is_err());
    }
}
