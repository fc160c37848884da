//! The backward Neumann system for `u`, its reflection across `∂D` and a
//! Hölder fit in time.
//!
//! Each component of `u` solves
//!
//! ```text
//! ∂_t u + ½Δu + b·∇u = 0,   u(T, x) = x,   ∂u/∂n = n   on ∂D.
//! ```
//!
//! The solver works with the displacement `w = u − x` in reversed time
//! `τ = T − t`, which turns the oblique data into a homogeneous Neumann
//! condition:
//!
//! ```text
//! ∂_τ w = ½Δw + b·∇w + b,   w(τ = 0) = 0,   ∂w/∂n = 0.
//! ```
//!
//! The zero and constant drifts are then reproduced to rounding.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::fields::{mollify, DriftField, Interpolation, MollifierKernel, SpaceTimeVectorField, SpatialGrid};
use crate::geometry::DomainSpec;
use crate::linalg::{bicgstab, Csr, LinePreconditioner};
use crate::{Error, Mat2, Result, Vec2};

/// Space and time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub dt: f64,
    pub h: f64,
    /// Angular node count for polar grids; `None` picks about `2πR/h`.
    #[serde(default)]
    pub nphi: Option<usize>,
}

impl Resolution {
    pub fn new(dt: f64, h: f64) -> Self {
        Resolution { dt, h, nphi: None }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution::new(2f64.powi(-10), 2f64.powi(-7))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    CrankNicolson,
    Explicit,
}

/// Data of the terminal-value problem.
#[derive(Debug, Clone)]
pub struct ParabolicProblem {
    pub domain: DomainSpec,
    pub drift: DriftField,
    pub horizon: f64,
    pub resolution: Resolution,
    pub scheme: TimeScheme,
    /// Solve with `b_n` instead of `b`.
    pub mollify_level: Option<u32>,
    pub solver_tol: f64,
    pub max_iter: usize,
    /// Upper bound on stored `nodes × slices`.
    pub storage_budget: usize,
    pub interpolation: Interpolation,
}

impl ParabolicProblem {
    pub fn new(domain: DomainSpec, drift: DriftField, horizon: f64, resolution: Resolution) -> Self {
        ParabolicProblem {
            domain,
            drift,
            horizon,
            resolution,
            scheme: TimeScheme::CrankNicolson,
            mollify_level: None,
            solver_tol: 1e-10,
            max_iter: 500,
            storage_budget: 1 << 22,
            interpolation: Interpolation::Cubic,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return Err(Error::InvalidParameter(format!("horizon {} must lie in (0, 1]", self.horizon)));
        }
        if !(self.resolution.dt > 0.0 && self.resolution.h > 0.0) {
            return Err(Error::InvalidParameter("dt and h must be positive".into()));
        }
        if self.drift.dim() != self.domain.dim() {
            return Err(Error::InvalidParameter("drift and domain dimensions differ".into()));
        }
        Ok(())
    }
}

/// Diagnostics of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub scheme: TimeScheme,
    pub drift: String,
    pub steps: usize,
    pub dt: f64,
    pub h: f64,
    pub nodes: usize,
    pub slices_stored: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub max_relative_residual: f64,
}

#[derive(Debug, Clone)]
pub struct PdeSolution {
    /// The displacement `w = u − x`.
    pub field: SpaceTimeVectorField,
    pub report: SolveReport,
}

impl PdeSolution {
    /// `max |w(t, x_i) − want(t)|` over stored slices and grid nodes.
    pub fn max_displacement_error(&self, want: impl Fn(f64) -> Vec2) -> f64 {
        let mut e: f64 = 0.0;
        for (s, &t) in self.field.times.iter().enumerate() {
            let w = want(t);
            for v in self.field.slice(s) {
                e = e.max((Vec2::new(v[0], v[1]) - w).norm());
            }
        }
        e
    }
}

/// Grid used for `domain` at spacing `h`.
pub fn build_grid(domain: &DomainSpec, res: &Resolution) -> Result<SpatialGrid> {
    match *domain {
        DomainSpec::Interval { a, b } => {
            let n = ((b - a) / res.h).round().max(4.0) as usize;
            Ok(SpatialGrid::Cells1d { lo: a, h: (b - a) / n as f64, n })
        }
        DomainSpec::Disk { radius } => {
            let nr = (radius / res.h).round().max(4.0) as usize;
            let nphi = match res.nphi {
                Some(n) if n >= 8 && n % 2 == 0 => n,
                Some(n) => return Err(Error::InvalidParameter(format!("nphi = {n} must be even and ≥ 8"))),
                None => (4 * (PI * radius / (2.0 * res.h)).round() as usize).max(16),
            };
            Ok(SpatialGrid::Polar { radius, nr, nphi })
        }
        DomainSpec::Ellipse { .. } => Err(Error::InvalidParameter(
            "the Neumann solver supports interval and disk domains only".into(),
        )),
    }
}

/// Assembles `A w = ½Δw + b·∇w` with even ghost reflections.
fn assemble(grid: &SpatialGrid, drift: &[Vec2]) -> Csr {
    let n = grid.len();
    let mut rows = Vec::with_capacity(n);
    match *grid {
        SpatialGrid::Cells1d { h, .. } => {
            for j in 0..n {
                let b = drift[j].x;
                let ji = j as i64;
                let nb = [
                    (grid.resolve(ji - 1, 0), 0.5 / (h * h) - b / (2.0 * h)),
                    (grid.resolve(ji + 1, 0), 0.5 / (h * h) + b / (2.0 * h)),
                ];
                rows.push(finish_row(j, &nb));
            }
        }
        SpatialGrid::Polar { radius, nr, nphi } => {
            let dr = radius / nr as f64;
            let dphi = TAU / nphi as f64;
            for j in 0..nr {
                let r = (j as f64 + 0.5) * dr;
                let (r_in, r_out) = (j as f64 * dr, (j as f64 + 1.0) * dr);
                for k in 0..nphi {
                    let i = j * nphi + k;
                    let phi = k as f64 * dphi;
                    let (s, c) = phi.sin_cos();
                    let b = drift[i];
                    let br = b.x * c + b.y * s;
                    let bp = -b.x * s + b.y * c;
                    let (ji, ki) = (j as i64, k as i64);
                    let mut nb: Vec<(usize, f64)> = Vec::with_capacity(6);
                    // Diffusion in flux form; the inner face of ring 0 is the origin.
                    nb.push((grid.resolve(ji + 1, ki), 0.5 * r_out / (r * dr * dr)));
                    if j > 0 {
                        nb.push((grid.resolve(ji - 1, ki), 0.5 * r_in / (r * dr * dr)));
                    }
                    let ang = 0.5 / (r * r * dphi * dphi);
                    nb.push((grid.resolve(ji, ki + 1), ang));
                    nb.push((grid.resolve(ji, ki - 1), ang));
                    // Advection by central differences; across the origin the
                    // inner neighbour is the mirrored node.
                    nb.push((grid.resolve(ji + 1, ki), br / (2.0 * dr)));
                    nb.push((grid.resolve(ji - 1, ki), -br / (2.0 * dr)));
                    nb.push((grid.resolve(ji, ki + 1), bp / (2.0 * r * dphi)));
                    nb.push((grid.resolve(ji, ki - 1), -bp / (2.0 * r * dphi)));
                    rows.push(finish_row(i, &nb));
                }
            }
        }
    }
    Csr::from_rows(rows)
}

/// Off-diagonal couplings plus a diagonal making every row sum to zero.
fn finish_row(i: usize, nb: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut row: Vec<(usize, f64)> = nb.to_vec();
    let total: f64 = nb.iter().map(|e| e.1).sum();
    row.push((i, -total));
    row
}

fn lines(grid: &SpatialGrid) -> (Vec<Vec<usize>>, bool) {
    match *grid {
        SpatialGrid::Cells1d { n, .. } => (vec![(0..n).collect()], false),
        SpatialGrid::Polar { nr, nphi, .. } => ((0..nr).map(|j| (j * nphi..(j + 1) * nphi).collect()).collect(), true),
    }
}

/// Solves the terminal-value problem and returns the displacement `w = u − x`.
pub fn solve_neumann_terminal(p: &ParabolicProblem) -> Result<PdeSolution> {
    p.validate()?;
    let grid = build_grid(&p.domain, &p.resolution)?;
    let drift = match p.mollify_level {
        Some(level) => mollify(&p.drift, MollifierKernel::new(level), Some(p.domain))?,
        None => p.drift.clone(),
    };
    let n = grid.len();
    let dim = p.domain.dim();
    let steps = ((p.horizon / p.resolution.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = p.horizon / steps as f64;
    // Presets are time independent; the drift is frozen at the terminal time.
    let b_nodes: Vec<Vec2> = (0..n).map(|i| drift.eval(p.horizon, &grid.node(i))).collect();
    let a = assemble(&grid, &b_nodes);

    if p.scheme == TimeScheme::Explicit {
        let bmax = b_nodes.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let h = grid.spacing();
        if bmax > 0.0 && dt > h / (2.0 * bmax) {
            return Err(Error::CflViolation(format!("dt = {dt:.3e} > h/(2|b|) = {:.3e}", h / (2.0 * bmax))));
        }
        let diag_max = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        if dt * diag_max > 1.0 {
            return Err(Error::CflViolation(format!("dt = {dt:.3e} > 1/max|A_ii| = {:.3e}", 1.0 / diag_max)));
        }
    }

    let max_slices = (p.storage_budget / n.max(1)).max(2);
    let mut stride = 1usize;
    while steps / stride + 2 > max_slices {
        stride *= 2;
    }

    let lhs = a.shifted(1.0, -0.5 * dt);
    let rhs_op = a.shifted(1.0, 0.5 * dt);
    let (line_sets, cyclic) = lines(&grid);
    let pre = LinePreconditioner::new(&lhs, &line_sets, cyclic);

    let mut w: Vec<Vec<f64>> = vec![vec![0.0; n]; dim];
    let mut w_prev: Vec<Vec<f64>> = w.clone();
    let mut stored: Vec<(f64, Vec<[f64; 2]>)> = vec![(p.horizon, vec![[0.0; 2]; n])];
    let mut report = SolveReport {
        scheme: p.scheme,
        drift: drift.tag(),
        steps,
        dt,
        h: grid.spacing(),
        nodes: n,
        slices_stored: 0,
        total_iterations: 0,
        max_iterations: 0,
        max_relative_residual: 0.0,
    };
    let mut tmp = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for step in 1..=steps {
        for c in 0..dim {
            let src: Vec<f64> = b_nodes.iter().map(|v| v[c]).collect();
            match p.scheme {
                TimeScheme::Explicit => {
                    a.mul(&w[c], &mut tmp);
                    w_prev[c].clone_from(&w[c]);
                    for i in 0..n {
                        w[c][i] += dt * (tmp[i] + src[i]);
                    }
                }
                TimeScheme::CrankNicolson => {
                    rhs_op.mul(&w[c], &mut rhs);
                    for i in 0..n {
                        rhs[i] += dt * src[i];
                    }
                    let mut guess = vec![0.0; n];
                    if step == 1 {
                        a.mul(&w[c], &mut tmp);
                        for i in 0..n {
                            guess[i] = w[c][i] + dt * (tmp[i] + src[i]);
                        }
                    } else {
                        for i in 0..n {
                            guess[i] = 2.0 * w[c][i] - w_prev[c][i];
                        }
                    }
                    let st = bicgstab(&lhs, &pre, &rhs, &mut guess, p.solver_tol, p.max_iter)?;
                    report.total_iterations += st.iterations;
                    report.max_iterations = report.max_iterations.max(st.iterations);
                    report.max_relative_residual = report.max_relative_residual.max(st.relative_residual);
                    w_prev[c] = std::mem::replace(&mut w[c], guess);
                }
            }
        }
        if step % stride == 0 || step == steps {
            let tau = step as f64 * dt;
            let t = if step == steps { 0.0 } else { p.horizon - tau };
            let slice: Vec<[f64; 2]> = (0..n).map(|i| [w[0][i], if dim > 1 { w[1][i] } else { 0.0 }]).collect();
            stored.push((t, slice));
        }
    }
    stored.reverse();
    report.slices_stored = stored.len();
    let times: Vec<f64> = stored.iter().map(|s| s.0).collect();
    let values: Vec<[f64; 2]> = stored.into_iter().flat_map(|s| s.1).collect();
    let field = SpaceTimeVectorField::new(times, grid, values, p.interpolation)?;
    Ok(PdeSolution { field, report })
}

/// `u` on `G'`: the grid solution inside `D̄` and the reflection
/// `2u(t, φ(x)) − u(t, 2φ(x) − x)` outside.
#[derive(Debug, Clone)]
pub struct ExtendedField {
    /// Displacement `w = u − x` on `D̄`.
    pub field: SpaceTimeVectorField,
    pub domain: DomainSpec,
}

/// Wraps a solved displacement field with the boundary reflection.
pub fn extend_across_boundary(field: SpaceTimeVectorField, domain: DomainSpec) -> ExtendedField {
    ExtendedField { field, domain }
}

impl ExtendedField {
    pub fn horizon(&self) -> f64 {
        *self.field.times.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Reflection data `(φ(x), 2φ(x) − x)` for `x ∉ D̄`, or `None` inside.
    fn mirror(&self, x: &Vec2) -> Result<Option<(Vec2, Vec2)>> {
        if self.domain.contains_closed(x) {
            return Ok(None);
        }
        let p = self.domain.project_to_boundary(x)?;
        Ok(Some((p, 2.0 * p - x)))
    }

    /// `w(t, x) = u(t, x) − x` with the boundary reflection applied outside.
    pub fn displacement(&self, t: f64, x: &Vec2) -> Result<Vec2> {
        match self.mirror(x)? {
            None => Ok(self.field.eval(t, x)),
            Some((p, q)) => {
                // 2u(φ) − u(q) − x = 2w(φ) − w(q) since 2φ − q = x.
                Ok(2.0 * self.field.eval(t, &p) - self.field.eval(t, &q))
            }
        }
    }

    /// Displacement and its Jacobian.
    pub fn displacement_with_grad(&self, t: f64, x: &Vec2) -> Result<(Vec2, Mat2)> {
        match self.mirror(x)? {
            None => Ok(self.field.eval_with_grad(t, x)),
            Some((p, q)) => {
                let dphi = projection_jacobian(&self.domain, x);
                let (wp, jp) = self.field.eval_with_grad(t, &p);
                let (wq, jq) = self.field.eval_with_grad(t, &q);
                let dq = 2.0 * dphi - Mat2::identity();
                Ok((2.0 * wp - wq, 2.0 * jp * dphi - jq * dq))
            }
        }
    }

    /// `u(t, x)`.
    pub fn u(&self, t: f64, x: &Vec2) -> Result<Vec2> {
        Ok(x + self.displacement(t, x)?)
    }

    /// `u(t, x)` and `D_x u(t, x)`; in 1-D the `(1, 1)` entry is 1.
    pub fn u_with_grad(&self, t: f64, x: &Vec2) -> Result<(Vec2, Mat2)> {
        let (w, jw) = self.displacement_with_grad(t, x)?;
        Ok((x + w, Mat2::identity() + jw))
    }

    /// `∂_t u(t, x)`.
    pub fn u_dt(&self, t: f64, x: &Vec2) -> Result<Vec2> {
        match self.mirror(x)? {
            None => Ok(self.field.eval_dt(t, x)),
            Some((p, q)) => Ok(2.0 * self.field.eval_dt(t, &p) - self.field.eval_dt(t, &q)),
        }
    }
}

/// Jacobian of the nearest-point map `φ` at `x` in the tube.
pub fn projection_jacobian(domain: &DomainSpec, x: &Vec2) -> Mat2 {
    match *domain {
        DomainSpec::Interval { .. } => Mat2::zeros(),
        DomainSpec::Disk { radius } => {
            let r = x.norm();
            let e = x / r;
            (Mat2::identity() - e * e.transpose()) * (radius / r)
        }
        DomainSpec::Ellipse { .. } => {
            let h = 1e-6 * domain.uniform_sphere_radius();
            let mut j = Mat2::zeros();
            for k in 0..2 {
                let mut e = Vec2::zeros();
                e[k] = h;
                let a = domain.nearest_boundary_point(&(x + e)).unwrap_or(*x);
                let b = domain.nearest_boundary_point(&(x - e)).unwrap_or(*x);
                j.set_column(k, &((a - b) / (2.0 * h)));
            }
            j
        }
    }
}

/// Result of the Hölder fit `|u(t) − u(s)| + ‖∇u(t) − ∇u(s)‖ ≤ M₀|t − s|^{α₀}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderFit {
    pub m0: f64,
    pub alpha0: f64,
    /// Set when `u` does not move in time; then `(M₀, α₀) = (0, 1)`.
    pub degenerate: bool,
    /// Sampled `(|t − s|, modulus)` pairs.
    pub pairs: Vec<(f64, f64)>,
}

/// Sample points of `G`: grid nodes (thinned to about `max_points`) and
/// their reflections across `∂D` when they lie within `δ₀/2` of it.
pub fn holder_sample_points(ext: &ExtendedField, max_points: usize) -> Vec<Vec2> {
    let grid = &ext.field.grid;
    let n = grid.len();
    let stride = (n / max_points.max(1)).max(1);
    let half = 0.5 * ext.domain.uniform_sphere_radius();
    let mut pts = Vec::new();
    for i in (0..n).step_by(stride) {
        let x = grid.node(i);
        pts.push(x);
        if let Ok(sd) = ext.domain.signed_distance(&x) {
            if sd < half {
                if let Ok(p) = ext.domain.nearest_boundary_point(&x) {
                    pts.push(2.0 * p - x);
                }
            }
        }
    }
    pts
}

/// Fits `(M₀, α₀)` over pairs of stored slices at dyadic lags.
pub fn holder_estimate(ext: &ExtendedField, max_points: usize) -> Result<HolderFit> {
    let times = &ext.field.times;
    let s = times.len();
    let pts = holder_sample_points(ext, max_points);
    let eval = |t: f64| -> Result<Vec<(Vec2, Mat2)>> { pts.iter().map(|x| ext.displacement_with_grad(t, x)).collect() };
    let mut cache: std::collections::BTreeMap<usize, Vec<(Vec2, Mat2)>> = Default::default();
    let mut pairs = Vec::new();
    let mut lag = 1;
    while lag < s {
        let n_base = (s - lag).min(6);
        for m in 0..n_base {
            let i = if n_base == 1 { 0 } else { m * (s - 1 - lag) / (n_base - 1) };
            let j = i + lag;
            for idx in [i, j] {
                if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(idx) {
                    e.insert(eval(times[idx])?);
                }
            }
            let (a, b) = (&cache[&i], &cache[&j]);
            let modulus = a
                .iter()
                .zip(b)
                .map(|((va, ja), (vb, jb))| (va - vb).norm() + (ja - jb).norm())
                .fold(0.0, f64::max);
            pairs.push((times[j] - times[i], modulus));
        }
        lag *= 2;
    }
    let scale = pairs.iter().map(|p| p.1).fold(0.0, f64::max);
    if scale <= 1e-13 {
        return Ok(HolderFit { m0: 0.0, alpha0: 1.0, degenerate: true, pairs });
    }
    let pts_fit: Vec<(f64, f64)> = pairs.iter().filter(|p| p.1 > 1e-14 * scale).map(|p| (p.0.ln(), p.1.ln())).collect();
    let alpha = if pts_fit.len() < 2 {
        1.0
    } else {
        let nf = pts_fit.len() as f64;
        let mx = pts_fit.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = pts_fit.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxx: f64 = pts_fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts_fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            1.0
        }
    };
    let alpha0 = alpha.clamp(1e-3, 1.0);
    let m0 = pairs.iter().map(|p| p.1 / p.0.powf(alpha0)).fold(0.0, f64::max);
    Ok(HolderFit { m0, alpha0, degenerate: false, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_drift_gives_identity() {
        for dom in [DomainSpec::interval(0.0, 1.0).unwrap(), DomainSpec::disk(1.0).unwrap()] {
            let p = ParabolicProblem::new(dom, DriftField::zero(dom.dim()), 0.5, Resolution::new(1.0 / 64.0, 1.0 / 16.0));
            let sol = solve_neumann_terminal(&p).unwrap();
            assert_eq!(sol.max_displacement_error(|_| Vec2::zeros()), 0.0);
        }
    }

    #[test]
    fn constant_drift_gives_translation() {
        let c = Vec2::new(0.7, -0.4);
        let dom = DomainSpec::disk(1.0).unwrap();
        let p = ParabolicProblem::new(dom, DriftField::constant(c, 2), 1.0, Resolution::new(1.0 / 64.0, 1.0 / 16.0));
        let sol = solve_neumann_terminal(&p).unwrap();
        assert!(sol.max_displacement_error(|t| c * (1.0 - t)) < 1e-9);
        let ext = extend_across_boundary(sol.field, dom);
        let x = Vec2::new(1.2, 0.1);
        let u = ext.u(0.25, &x).unwrap();
        assert!((u - (x + 0.75 * c)).norm() < 1e-9);
        let (_, du) = ext.u_with_grad(0.25, &x).unwrap();
        assert!((du - Mat2::identity()).norm() < 1e-7);
    }

    #[test]
    fn explicit_scheme_checks_stability() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let mut p = ParabolicProblem::new(dom, DriftField::sign1d(2.0, 0.5, 1), 0.25, Resolution::new(0.01, 0.05));
        p.scheme = TimeScheme::Explicit;
        assert!(matches!(solve_neumann_terminal(&p), Err(Error::CflViolation(_))));
        p.resolution = Resolution::new(1e-3, 0.05);
        assert!(solve_neumann_terminal(&p).is_ok());
    }

    #[test]
    fn sign_drift_converges_under_refinement() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let solve = |h: f64| {
            let p = ParabolicProblem::new(dom, DriftField::sign1d(2.0, 0.5, 1), 0.25, Resolution::new(h * h * 4.0, h));
            extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom)
        };
        let us: Vec<ExtendedField> = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0].iter().map(|&h| solve(h)).collect();
        let diff = |a: &ExtendedField, b: &ExtendedField| {
            (0..=200)
                .map(|k| {
                    let x = Vec2::new(k as f64 / 200.0, 0.0);
                    (a.u(0.0, &x).unwrap() - b.u(0.0, &x).unwrap()).norm()
                })
                .fold(0.0, f64::max)
        };
        let d1 = diff(&us[0], &us[1]);
        let d2 = diff(&us[1], &us[2]);
        let d3 = diff(&us[2], &us[3]);
        assert!(d1 / d2 >= 3.0 && d2 / d3 >= 3.0, "{d1} {d2} {d3}");
    }

    #[test]
    fn neumann_flux_vanishes_at_boundary() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let p = ParabolicProblem::new(dom, DriftField::from_preset("radial_jump", &[1.0], &dom).unwrap(), 0.25, Resolution::new(1.0 / 128.0, 1.0 / 32.0));
        let ext = extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom);
        let h = 1.0 / 32.0;
        for k in 0..100 {
            let th = TAU * k as f64 / 100.0;
            let e = Vec2::new(th.cos(), th.sin());
            let inner = ext.displacement(0.0, &(e * (1.0 - h))).unwrap();
            let outer = ext.displacement(0.0, &e).unwrap();
            // One-sided derivative of w along n is O(h).
            assert!(((outer - inner) / h).norm() < 10.0 * h);
        }
    }

    #[test]
    fn extension_is_continuous_across_boundary() {
        let dom = DomainSpec::disk(1.0).unwrap();
        let p = ParabolicProblem::new(dom, DriftField::from_preset("radial_jump", &[1.0], &dom).unwrap(), 0.25, Resolution::new(1.0 / 128.0, 1.0 / 32.0));
        let ext = extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom);
        let mut lip: f64 = 0.0;
        for k in 0..200 {
            let th = TAU * k as f64 / 200.0;
            let x = Vec2::new(0.9 * th.cos(), 0.9 * th.sin());
            lip = lip.max(ext.u_with_grad(0.0, &x).unwrap().1.norm());
        }
        let h = 1.0 / 32.0;
        for k in 0..1000 {
            let th = TAU * (k as f64 + 0.3) / 1000.0;
            let e = Vec2::new(th.cos(), th.sin());
            let jump = (ext.u(0.0, &(e * (1.0 + 1e-9))).unwrap() - ext.u(0.0, &(e * (1.0 - 1e-9))).unwrap()).norm();
            assert!(jump < 2.0 * h * lip);
        }
    }

    #[test]
    fn holder_fit_on_forced_cases() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let p = ParabolicProblem::new(dom, DriftField::zero(1), 1.0, Resolution::new(1.0 / 64.0, 1.0 / 32.0));
        let fit = holder_estimate(&extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom), 512).unwrap();
        assert!(fit.degenerate && fit.m0 == 0.0 && fit.alpha0 == 1.0);
        let c = Vec2::new(1.5, 0.0);
        let p = ParabolicProblem::new(dom, DriftField::constant(c, 1), 1.0, Resolution::new(1.0 / 64.0, 1.0 / 32.0));
        let fit = holder_estimate(&extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom), 512).unwrap();
        assert!((fit.alpha0 - 1.0).abs() < 1e-6 && (fit.m0 - 1.5).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn holder_exponent_of_sign_drift_is_stable() {
        let dom = DomainSpec::interval(0.0, 1.0).unwrap();
        let fit = |h: f64| {
            let p = ParabolicProblem::new(dom, DriftField::sign1d(2.0, 0.5, 1), 0.25, Resolution::new(h / 4.0, h));
            holder_estimate(&extend_across_boundary(solve_neumann_terminal(&p).unwrap().field, dom), 4096).unwrap()
        };
        let a = fit(1.0 / 64.0);
        let b = fit(1.0 / 128.0);
        assert!(a.alpha0 > 0.0 && a.alpha0 < 1.0);
        assert!((a.alpha0 - b.alpha0).abs() < 0.1, "{} {}", a.alpha0, b.alpha0);
    }
}
