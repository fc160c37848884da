//! Drift presets, mollification and gridded space-time fields.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::geometry::DomainSpec;
use crate::quadrature::{composite, integrate};
use crate::{Error, Mat2, Result, Vec2};

/// Bounded, possibly discontinuous drift presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum DriftPreset {
    Zero,
    Constant { c: [f64; 2] },
    /// `bound·sign(x₁ − mid)·e₁`.
    Sign1d { bound: f64, mid: f64 },
    /// `±bound·(1, 1)/√2` alternating on a `k × k` grid of cells over `[lo, hi]`
    /// (`±bound·e₁` in one dimension).
    Checkerboard2d { bound: f64, k: usize, lo: [f64; 2], hi: [f64; 2] },
    /// `bound·sign(|x| − jump)·x/|x|`.
    RadialJump { bound: f64, jump: f64 },
}

impl DriftPreset {
    fn eval(&self, x: &Vec2, dim: usize) -> Vec2 {
        match *self {
            DriftPreset::Zero => Vec2::zeros(),
            DriftPreset::Constant { c } => {
                if dim == 1 {
                    Vec2::new(c[0], 0.0)
                } else {
                    Vec2::new(c[0], c[1])
                }
            }
            DriftPreset::Sign1d { bound, mid } => Vec2::new(bound * sign(x.x - mid), 0.0),
            DriftPreset::Checkerboard2d { bound, k, lo, hi } => {
                let i = ((x.x - lo[0]) / (hi[0] - lo[0]) * k as f64).floor() as i64;
                if dim == 1 {
                    let s = if i.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                    return Vec2::new(bound * s, 0.0);
                }
                let j = ((x.y - lo[1]) / (hi[1] - lo[1]) * k as f64).floor() as i64;
                let s = if (i + j).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                Vec2::new(1.0, 1.0) * (bound * s * FRAC_1_SQRT_2)
            }
            DriftPreset::RadialJump { bound, jump } => {
                let r = x.norm();
                if r == 0.0 {
                    Vec2::zeros()
                } else {
                    x * (bound * sign(r - jump) / r)
                }
            }
        }
    }

    fn bound(&self, dim: usize) -> f64 {
        match *self {
            DriftPreset::Zero => 0.0,
            DriftPreset::Constant { c } => {
                if dim == 1 {
                    c[0].abs()
                } else {
                    c[0].hypot(c[1])
                }
            }
            DriftPreset::Sign1d { bound, .. }
            | DriftPreset::Checkerboard2d { bound, .. }
            | DriftPreset::RadialJump { bound, .. } => bound.abs(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            DriftPreset::Zero => "zero",
            DriftPreset::Constant { .. } => "constant",
            DriftPreset::Sign1d { .. } => "sign1d",
            DriftPreset::Checkerboard2d { .. } => "checkerboard2d",
            DriftPreset::RadialJump { .. } => "radial_jump",
        }
    }

    fn is_discontinuous(&self) -> bool {
        !matches!(self, DriftPreset::Zero | DriftPreset::Constant { .. })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A bounded drift `b(t, x)`, either a preset or its mollification.
#[derive(Debug, Clone)]
pub enum DriftField {
    Preset { preset: DriftPreset, dim: usize },
    Mollified(Box<MollifiedDrift>),
}

/// Tensor-product quadrature of `b` against `ψ_n`.
#[derive(Debug, Clone)]
pub struct MollifiedDrift {
    pub base: DriftField,
    pub kernel: MollifierKernel,
    /// When set, the base drift is extended by zero outside the closure.
    pub support: Option<DomainSpec>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Panels per dimension of the accepted rule.
    pub panels: usize,
}

impl DriftField {
    pub fn preset(preset: DriftPreset, dim: usize) -> Self {
        DriftField::Preset { preset, dim }
    }

    pub fn zero(dim: usize) -> Self {
        Self::preset(DriftPreset::Zero, dim)
    }

    pub fn constant(c: Vec2, dim: usize) -> Self {
        Self::preset(DriftPreset::Constant { c: [c.x, c.y] }, dim)
    }

    pub fn sign1d(bound: f64, mid: f64, dim: usize) -> Self {
        Self::preset(DriftPreset::Sign1d { bound, mid }, dim)
    }

    /// Builds a preset from config; `domain` supplies defaults.
    ///
    /// Parameters: `zero []`, `constant [c₁(, c₂)]`, `sign1d [bound(, mid)]`,
    /// `checkerboard2d [bound, k]`, `radial_jump [bound(, R)]`.
    pub fn from_preset(name: &str, params: &[f64], domain: &DomainSpec) -> Result<Self> {
        let dim = domain.dim();
        let centre = match *domain {
            DomainSpec::Interval { a, b } => 0.5 * (a + b),
            _ => 0.0,
        };
        let bad = || Error::InvalidParameter(format!("bad parameters for drift `{name}`: {params:?}"));
        let preset = match name {
            "zero" if params.is_empty() => DriftPreset::Zero,
            "constant" => match params {
                [c] => DriftPreset::Constant { c: [*c, 0.0] },
                [c0, c1] => DriftPreset::Constant { c: [*c0, *c1] },
                _ => return Err(bad()),
            },
            "sign1d" => match params {
                [b] => DriftPreset::Sign1d { bound: *b, mid: centre },
                [b, m] => DriftPreset::Sign1d { bound: *b, mid: *m },
                _ => return Err(bad()),
            },
            "checkerboard2d" => match params {
                [b, k] if *k >= 1.0 && k.fract() == 0.0 => {
                    let (lo, hi) = match *domain {
                        DomainSpec::Interval { a, b } => ([a, 0.0], [b, 1.0]),
                        DomainSpec::Disk { radius } => ([-radius, -radius], [radius, radius]),
                        DomainSpec::Ellipse { a, b } => ([-a, -b], [a, b]),
                    };
                    DriftPreset::Checkerboard2d { bound: *b, k: *k as usize, lo, hi }
                }
                _ => return Err(bad()),
            },
            "radial_jump" => {
                let big_r = match *domain {
                    DomainSpec::Disk { radius } => radius,
                    _ => domain.uniform_sphere_radius(),
                };
                match params {
                    [b] => DriftPreset::RadialJump { bound: *b, jump: 0.5 * big_r },
                    [b, r] => DriftPreset::RadialJump { bound: *b, jump: 0.5 * r },
                    _ => return Err(bad()),
                }
            }
            _ => return Err(Error::InvalidParameter(format!("unknown drift preset `{name}` or bad parameters"))),
        };
        if preset.bound(dim).is_nan() {
            return Err(bad());
        }
        Ok(Self::preset(preset, dim))
    }

    pub fn dim(&self) -> usize {
        match self {
            DriftField::Preset { dim, .. } => *dim,
            DriftField::Mollified(m) => m.base.dim(),
        }
    }

    /// `b(t, x)`.
    pub fn eval(&self, t: f64, x: &Vec2) -> Vec2 {
        match self {
            DriftField::Preset { preset, dim } => preset.eval(x, *dim),
            DriftField::Mollified(m) => m.eval(t, x),
        }
    }

    /// Supremum norm bound.
    pub fn bound(&self) -> f64 {
        match self {
            DriftField::Preset { preset, dim } => preset.bound(*dim),
            DriftField::Mollified(m) => m.base.bound(),
        }
    }

    /// All presets are autonomous.
    pub fn is_time_independent(&self) -> bool {
        true
    }

    pub fn is_discontinuous(&self) -> bool {
        match self {
            DriftField::Preset { preset, .. } => preset.is_discontinuous(),
            DriftField::Mollified(_) => false,
        }
    }

    /// Short tag for reports, e.g. `sign1d` or `sign1d*psi_4`.
    pub fn tag(&self) -> String {
        match self {
            DriftField::Preset { preset, .. } => preset.name().to_string(),
            DriftField::Mollified(m) => format!("{}*psi_{}", m.base.tag(), m.kernel.level),
        }
    }

    /// The underlying preset, if any.
    pub fn as_preset(&self) -> Option<&DriftPreset> {
        match self {
            DriftField::Preset { preset, .. } => Some(preset),
            DriftField::Mollified(m) => m.base.as_preset(),
        }
    }
}

/// The kernel `ψ_n(t, x) = 2^{n(d+1)} ψ(2ⁿt, 2ⁿx)` with `ψ` a product of
/// normalised bumps `exp(−1/(1 − s²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierKernel {
    pub level: u32,
}

impl MollifierKernel {
    pub fn new(level: u32) -> Self {
        MollifierKernel { level }
    }

    /// Half-width `2^{−n}` of the support in each coordinate.
    pub fn scale(&self) -> f64 {
        (0.5f64).powi(self.level as i32)
    }

    /// Unnormalised 1-D profile.
    pub fn bump(s: f64) -> f64 {
        if s.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp()
        }
    }

    /// `∫_{−1}^{1} exp(−1/(1 − s²)) ds`.
    pub fn normalization() -> f64 {
        static C: OnceLock<f64> = OnceLock::new();
        *C.get_or_init(|| integrate(Self::bump, -1.0, 1.0, 256, 8))
    }

    /// `ψ_n(t, x)` in `d + 1` variables.
    pub fn eval(&self, t: f64, x: &Vec2, dim: usize) -> f64 {
        let k = 1.0 / self.scale();
        let c = Self::normalization();
        let mut v = k * Self::bump(k * t) / c;
        for i in 0..dim {
            v *= k * Self::bump(k * x[i]) / c;
        }
        v
    }
}

/// Relative tolerance of the adaptive mollification rule.
pub const MOLLIFY_TOL: f64 = 2e-2;

/// Convolves `b` with `ψ_n` by an adaptive tensor-product rule.
///
/// Panels per coordinate double from 4 until the value at a fixed set of probe
/// points changes by less than `MOLLIFY_TOL·max(bound, 1)`. Since all presets
/// are autonomous, the time integral is exact and skipped. Discrete weights
/// are normalised to unit mass and mirrored so that constants are reproduced
/// exactly and odd integrands cancel.
pub fn mollify(b: &DriftField, kernel: MollifierKernel, support: Option<DomainSpec>) -> Result<DriftField> {
    let dim = b.dim();
    let max_panels = if dim == 1 { 256 } else { 64 };
    let probes: Vec<Vec2> = (0..12)
        .map(|i| {
            let s = i as f64 / 12.0;
            let r = 0.05 + 0.9 * s;
            let th = TAU * (0.37 + 0.61 * s);
            if dim == 1 {
                Vec2::new(r, 0.0)
            } else {
                Vec2::new(r * th.cos(), r * th.sin())
            }
        })
        .collect();
    let scale = b.bound().max(1.0);
    let mut panels = 4;
    let mut prev: Option<Vec<Vec2>> = None;
    loop {
        let (nodes, weights) = kernel_rule(panels);
        let m = MollifiedDrift { base: b.clone(), kernel, support, nodes, weights, panels };
        let vals: Vec<Vec2> = probes.iter().map(|x| m.eval(0.0, x)).collect();
        if let Some(p) = &prev {
            let change = vals.iter().zip(p).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            if change <= MOLLIFY_TOL * scale {
                return Ok(DriftField::Mollified(Box::new(m)));
            }
        }
        if !b.is_discontinuous() && prev.is_some() {
            return Ok(DriftField::Mollified(Box::new(m)));
        }
        prev = Some(vals);
        panels *= 2;
        if panels > max_panels {
            return Err(Error::QuadratureFailure(format!(
                "mollification of {} at level {} not converged with {} panels",
                b.tag(),
                kernel.level,
                max_panels
            )));
        }
    }
}

/// Symmetric composite rule on `[−1, 1]` with weights `w_i·bump(s_i)`
/// normalised to sum 1.
fn kernel_rule(panels: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut xs, ws) = composite(-1.0, 1.0, panels, 4);
    let mut w: Vec<f64> = xs.iter().zip(&ws).map(|(x, w)| w * MollifierKernel::bump(*x)).collect();
    let n = xs.len();
    for i in 0..n / 2 {
        xs[n - 1 - i] = -xs[i];
        w[n - 1 - i] = w[i];
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    (xs, w)
}

impl MollifiedDrift {
    fn base_eval(&self, t: f64, x: &Vec2) -> Vec2 {
        if let Some(d) = &self.support {
            if !d.contains_closed(x) {
                return Vec2::zeros();
            }
        }
        self.base.eval(t, x)
    }

    pub fn eval(&self, t: f64, x: &Vec2) -> Vec2 {
        let eps = self.kernel.scale();
        let dim = self.base.dim();
        let mut acc = Vec2::zeros();
        if dim == 1 {
            for (s, w) in self.nodes.iter().zip(&self.weights) {
                acc += self.base_eval(t, &Vec2::new(x.x - eps * s, 0.0)) * *w;
            }
        } else {
            for (s1, w1) in self.nodes.iter().zip(&self.weights) {
                let mut row = Vec2::zeros();
                for (s2, w2) in self.nodes.iter().zip(&self.weights) {
                    row += self.base_eval(t, &Vec2::new(x.x - eps * s1, x.y - eps * s2)) * *w2;
                }
                acc += row * *w1;
            }
        }
        acc
    }
}

/// Spatial grid of a [`SpaceTimeVectorField`].
///
/// Both variants are cell centred, so boundary faces fall half-way between
/// nodes and Neumann closures are even reflections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialGrid {
    /// `x_j = lo + (j + ½)h`, `j = 0..n`.
    Cells1d { lo: f64, h: f64, n: usize },
    /// `r_j = (j + ½)Δr`, `φ_k = kΔφ` with `Δr = radius/nr`, `Δφ = 2π/nphi`.
    Polar { radius: f64, nr: usize, nphi: usize },
}

impl SpatialGrid {
    pub fn len(&self) -> usize {
        match *self {
            SpatialGrid::Cells1d { n, .. } => n,
            SpatialGrid::Polar { nr, nphi, .. } => nr * nphi,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical location of node `i`.
    pub fn node(&self, i: usize) -> Vec2 {
        match *self {
            SpatialGrid::Cells1d { lo, h, .. } => Vec2::new(lo + (i as f64 + 0.5) * h, 0.0),
            SpatialGrid::Polar { radius, nr, nphi } => {
                let (j, k) = (i / nphi, i % nphi);
                let r = (j as f64 + 0.5) * radius / nr as f64;
                let phi = k as f64 * TAU / nphi as f64;
                Vec2::new(r * phi.cos(), r * phi.sin())
            }
        }
    }

    /// Characteristic spacing `h` (radial spacing for polar grids).
    pub fn spacing(&self) -> f64 {
        match *self {
            SpatialGrid::Cells1d { h, .. } => h,
            SpatialGrid::Polar { radius, nr, .. } => radius / nr as f64,
        }
    }

    /// Flat index of `(j, k)` after applying the virtual ghost rules.
    ///
    /// 1-D: even reflection across both end faces. Polar: `j < 0` maps across
    /// the origin to `(−1 − j, k + nphi/2)`, `j ≥ nr` reflects across `r = R`,
    /// and `k` is periodic.
    #[inline]
    pub fn resolve(&self, j: i64, k: i64) -> usize {
        match *self {
            SpatialGrid::Cells1d { n, .. } => {
                let n = n as i64;
                let mut j = j;
                loop {
                    if j < 0 {
                        j = -1 - j;
                    } else if j >= n {
                        j = 2 * n - 1 - j;
                    } else {
                        break;
                    }
                }
                j as usize
            }
            SpatialGrid::Polar { nr, nphi, .. } => {
                let (nr, np) = (nr as i64, nphi as i64);
                let (mut j, mut k) = (j, k);
                if j < 0 {
                    j = -1 - j;
                    k += np / 2;
                }
                if j >= nr {
                    j = 2 * nr - 1 - j;
                }
                (j * np + k.rem_euclid(np)) as usize
            }
        }
    }
}

/// Interpolation order of a gridded field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Cubic,
}

#[inline]
fn weights(f: f64, order: Interpolation) -> ([f64; 4], [f64; 4]) {
    match order {
        Interpolation::Cubic => {
            let f2 = f * f;
            let f3 = f2 * f;
            (
                [
                    0.5 * (-f3 + 2.0 * f2 - f),
                    0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
                    0.5 * (-3.0 * f3 + 4.0 * f2 + f),
                    0.5 * (f3 - f2),
                ],
                [
                    0.5 * (-3.0 * f2 + 4.0 * f - 1.0),
                    0.5 * (9.0 * f2 - 10.0 * f),
                    0.5 * (-9.0 * f2 + 8.0 * f + 1.0),
                    0.5 * (3.0 * f2 - 2.0 * f),
                ],
            )
        }
        Interpolation::Linear => ([0.0, 1.0 - f, f, 0.0], [0.0, -1.0, 1.0, 0.0]),
    }
}

/// A vector field sampled on `times × grid`, interpolated (Catmull–Rom or
/// linear) in space and linearly in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeVectorField {
    pub times: Vec<f64>,
    pub grid: SpatialGrid,
    /// Slice-major: `values[s * grid.len() + i]`.
    pub values: Vec<[f64; 2]>,
    pub interpolation: Interpolation,
}

impl SpaceTimeVectorField {
    pub fn new(times: Vec<f64>, grid: SpatialGrid, values: Vec<[f64; 2]>, interpolation: Interpolation) -> Result<Self> {
        if times.is_empty() || values.len() != times.len() * grid.len() {
            return Err(Error::InvalidParameter("field value count does not match grids".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("time grid must be strictly increasing".into()));
        }
        if let SpatialGrid::Polar { nphi, .. } = grid {
            if nphi % 2 != 0 {
                return Err(Error::InvalidParameter("polar grids need an even angular count".into()));
            }
        }
        Ok(SpaceTimeVectorField { times, grid, values, interpolation })
    }

    pub fn dim(&self) -> usize {
        match self.grid {
            SpatialGrid::Cells1d { .. } => 1,
            SpatialGrid::Polar { .. } => 2,
        }
    }

    pub fn slice(&self, s: usize) -> &[[f64; 2]] {
        let n = self.grid.len();
        &self.values[s * n..(s + 1) * n]
    }

    /// Slice index and linear weight of the later slice.
    fn locate_time(&self, t: f64) -> (usize, f64) {
        let ts = &self.times;
        if ts.len() == 1 || t <= ts[0] {
            return (0, 0.0);
        }
        let last = ts.len() - 1;
        if t >= ts[last] {
            return (last - 1, 1.0);
        }
        let i = ts.partition_point(|&v| v <= t) - 1;
        (i, (t - ts[i]) / (ts[i + 1] - ts[i]))
    }

    /// Value and spatial derivative of one slice.
    fn slice_eval(&self, s: usize, x: &Vec2, want_grad: bool) -> (Vec2, Mat2) {
        let vals = self.slice(s);
        match self.grid {
            SpatialGrid::Cells1d { lo, h, .. } => {
                let xi = (x.x - lo) / h - 0.5;
                let j = xi.floor();
                let (w, dw) = weights(xi - j, self.interpolation);
                let j = j as i64;
                let mut v = 0.0;
                let mut g = 0.0;
                for m in 0..4 {
                    let val = vals[self.grid.resolve(j - 1 + m as i64, 0)][0];
                    v += w[m] * val;
                    g += dw[m] * val;
                }
                let mut jac = Mat2::zeros();
                jac[(0, 0)] = g / h;
                (Vec2::new(v, 0.0), jac)
            }
            SpatialGrid::Polar { radius, nr, nphi } => {
                let r = x.norm();
                let dr = radius / nr as f64;
                if want_grad && r < 1.5 * dr {
                    let hh = 1e-6 * dr;
                    let v = self.slice_eval(s, x, false).0;
                    let mut jac = Mat2::zeros();
                    for k in 0..2 {
                        let mut e = Vec2::zeros();
                        e[k] = hh;
                        let c = (self.slice_eval(s, &(x + e), false).0 - self.slice_eval(s, &(x - e), false).0) / (2.0 * hh);
                        jac.set_column(k, &c);
                    }
                    return (v, jac);
                }
                let r_eval = r.min(radius);
                let phi = x.y.atan2(x.x).rem_euclid(TAU);
                let dphi = TAU / nphi as f64;
                let xi = r_eval / dr - 0.5;
                let j = xi.floor();
                let (wr, dwr) = weights(xi - j, self.interpolation);
                let eta = phi / dphi;
                let k = eta.floor();
                let (wp, dwp) = weights(eta - k, self.interpolation);
                let (j, k) = (j as i64, k as i64);
                let mut v = [0.0; 2];
                let mut vr = [0.0; 2];
                let mut vp = [0.0; 2];
                for a in 0..4 {
                    if wr[a] == 0.0 && dwr[a] == 0.0 {
                        continue;
                    }
                    for b in 0..4 {
                        if wp[b] == 0.0 && dwp[b] == 0.0 {
                            continue;
                        }
                        let val = vals[self.grid.resolve(j - 1 + a as i64, k - 1 + b as i64)];
                        for c in 0..2 {
                            v[c] += wr[a] * wp[b] * val[c];
                            if want_grad {
                                vr[c] += dwr[a] * wp[b] * val[c];
                                vp[c] += wr[a] * dwp[b] * val[c];
                            }
                        }
                    }
                }
                let mut jac = Mat2::zeros();
                if want_grad {
                    let (sp, cp) = phi.sin_cos();
                    let rr = r.max(1e-300);
                    for c in 0..2 {
                        let dr_v = vr[c] / dr;
                        let dp_v = vp[c] / dphi;
                        jac[(c, 0)] = cp * dr_v - sp / rr * dp_v;
                        jac[(c, 1)] = sp * dr_v + cp / rr * dp_v;
                    }
                }
                (Vec2::new(v[0], v[1]), jac)
            }
        }
    }

    /// Interpolated value at `(t, x)`; `x` should lie in the closure of the grid.
    pub fn eval(&self, t: f64, x: &Vec2) -> Vec2 {
        let (s, w) = self.locate_time(t);
        let a = self.slice_eval(s, x, false).0;
        if w == 0.0 || self.times.len() == 1 {
            return a;
        }
        let b = self.slice_eval(s + 1, x, false).0;
        a * (1.0 - w) + b * w
    }

    /// Value and spatial Jacobian `J[(i, k)] = ∂_k v^i`.
    pub fn eval_with_grad(&self, t: f64, x: &Vec2) -> (Vec2, Mat2) {
        let (s, w) = self.locate_time(t);
        let (a, ja) = self.slice_eval(s, x, true);
        if w == 0.0 || self.times.len() == 1 {
            return (a, ja);
        }
        let (b, jb) = self.slice_eval(s + 1, x, true);
        (a * (1.0 - w) + b * w, ja * (1.0 - w) + jb * w)
    }

    /// Time derivative (slice difference quotient).
    pub fn eval_dt(&self, t: f64, x: &Vec2) -> Vec2 {
        if self.times.len() == 1 {
            return Vec2::zeros();
        }
        let (s, _) = self.locate_time(t);
        let a = self.slice_eval(s, x, false).0;
        let b = self.slice_eval(s + 1, x, false).0;
        (b - a) / (self.times[s + 1] - self.times[s])
    }

    /// Writes the flat binary layout and a JSON sidecar next to it.
    ///
    /// Layout (little endian): magic `RSDEFLD1`, `u32` grid kind (0 = cells1d,
    /// 1 = polar), `u32` interpolation (0 = linear, 1 = cubic), three `f64`
    /// grid parameters, two `u64` grid counts, `u64` slice count, the time
    /// grid, then `values` row-major as (slice, node, component).
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(64 + 8 * (self.times.len() + 2 * self.values.len()));
        buf.extend_from_slice(b"RSDEFLD1");
        let (kind, p, n) = match self.grid {
            SpatialGrid::Cells1d { lo, h, n } => (0u32, [lo, h, 0.0], [n as u64, 1]),
            SpatialGrid::Polar { radius, nr, nphi } => (1u32, [radius, 0.0, 0.0], [nr as u64, nphi as u64]),
        };
        buf.extend_from_slice(&kind.to_le_bytes());
        let interp: u32 = match self.interpolation {
            Interpolation::Linear => 0,
            Interpolation::Cubic => 1,
        };
        buf.extend_from_slice(&interp.to_le_bytes());
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in n {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.times.len() as u64).to_le_bytes());
        for t in &self.times {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v[0].to_le_bytes());
            buf.extend_from_slice(&v[1].to_le_bytes());
        }
        crate::io::write_atomic(path, &buf)?;
        let sidecar = serde_json::json!({
            "format": "RSDEFLD1",
            "grid": self.grid,
            "interpolation": self.interpolation,
            "slices": self.times.len(),
            "nodes_per_slice": self.grid.len(),
            "components": 2,
            "value": "displacement u(t,x) - x",
            "time_range": [self.times[0], self.times[self.times.len() - 1]],
            "payload_order": ["slice", "node", "component"],
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        crate::io::write_json_atomic(Path::new(&side), &sidecar)?;
        Ok(())
    }

    /// Reads a field written by [`write_binary`](Self::write_binary).
    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::InvalidParameter(format!("{} is not a field file", path.display()));
        if bytes.len() < 64 || &bytes[..8] != b"RSDEFLD1" {
            return Err(bad());
        }
        let mut pos = 8;
        let u32_ = |pos: &mut usize| {
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            v
        };
        let kind = u32_(&mut pos);
        let interp = u32_(&mut pos);
        let rd = |pos: &mut usize| -> Result<[u8; 8]> {
            let s = bytes.get(*pos..*pos + 8).ok_or_else(bad)?;
            *pos += 8;
            Ok(s.try_into().unwrap())
        };
        let mut p = [0.0; 3];
        for v in &mut p {
            *v = f64::from_le_bytes(rd(&mut pos)?);
        }
        let n0 = u64::from_le_bytes(rd(&mut pos)?) as usize;
        let n1 = u64::from_le_bytes(rd(&mut pos)?) as usize;
        let nt = u64::from_le_bytes(rd(&mut pos)?) as usize;
        let grid = match kind {
            0 => SpatialGrid::Cells1d { lo: p[0], h: p[1], n: n0 },
            1 => SpatialGrid::Polar { radius: p[0], nr: n0, nphi: n1 },
            _ => return Err(bad()),
        };
        let mut times = Vec::with_capacity(nt);
        for _ in 0..nt {
            times.push(f64::from_le_bytes(rd(&mut pos)?));
        }
        let mut values = Vec::with_capacity(nt * grid.len());
        for _ in 0..nt * grid.len() {
            let a = f64::from_le_bytes(rd(&mut pos)?);
            let b = f64::from_le_bytes(rd(&mut pos)?);
            values.push([a, b]);
        }
        let interpolation = if interp == 0 { Interpolation::Linear } else { Interpolation::Cubic };
        Self::new(times, grid, values, interpolation)
    }
}

/// The space-time set `{(t, x) : 0 < t < T, x ∈ D, extra(t, x)}`.
pub struct SpaceTimeRegion<'a> {
    pub horizon: f64,
    pub domain: DomainSpec,
    pub membership: Option<&'a (dyn Fn(f64, &Vec2) -> bool + Sync)>,
}

impl<'a> SpaceTimeRegion<'a> {
    pub fn new(horizon: f64, domain: DomainSpec) -> Self {
        SpaceTimeRegion { horizon, domain, membership: None }
    }
}

/// `(∫∫_region |f|^p)^{1/p}` by tensor Gauss–Legendre quadrature.
///
/// Time and radius use `panels` four-point panels; the angle uses `8·panels`
/// equispaced nodes (spectrally accurate for periodic integrands).
pub fn norm_lp_spacetime<F>(f: F, p: f64, region: &SpaceTimeRegion<'_>, panels: usize) -> f64
where
    F: Fn(f64, &Vec2) -> f64,
{
    assert!(p >= 1.0);
    let (ts, tw) = composite(0.0, region.horizon, panels, 4);
    lp_tensor(f, p, region, panels, &ts, &tw)
}

/// [`norm_lp_spacetime`] for integrands that do not depend on time: a single
/// time node carries the whole horizon, so the spatial rule can be finer.
pub fn norm_lp_static<F>(f: F, p: f64, region: &SpaceTimeRegion<'_>, panels: usize) -> f64
where
    F: Fn(f64, &Vec2) -> f64,
{
    assert!(p >= 1.0);
    lp_tensor(f, p, region, panels, &[0.5 * region.horizon], &[region.horizon])
}

fn lp_tensor<F>(f: F, p: f64, region: &SpaceTimeRegion<'_>, panels: usize, ts: &[f64], tw: &[f64]) -> f64
where
    F: Fn(f64, &Vec2) -> f64,
{
    let member = |t: f64, x: &Vec2| region.membership.map(|m| m(t, x)).unwrap_or(true);
    let mut acc = 0.0;
    match region.domain {
        DomainSpec::Interval { a, b } => {
            let (xs, xw) = composite(a, b, panels, 4);
            for (t, wt) in ts.iter().zip(tw) {
                for (x, wx) in xs.iter().zip(&xw) {
                    let pt = Vec2::new(*x, 0.0);
                    if member(*t, &pt) {
                        acc += wt * wx * f(*t, &pt).abs().powf(p);
                    }
                }
            }
        }
        DomainSpec::Disk { radius: _ } | DomainSpec::Ellipse { .. } => {
            let (sa, sb) = match region.domain {
                DomainSpec::Disk { radius } => (radius, radius),
                DomainSpec::Ellipse { a, b } => (a, b),
                _ => unreachable!(),
            };
            let (rs, rw) = composite(0.0, 1.0, panels, 4);
            let nphi = 8 * panels;
            let dphi = TAU / nphi as f64;
            for (t, wt) in ts.iter().zip(tw) {
                for (r, wr) in rs.iter().zip(&rw) {
                    for k in 0..nphi {
                        let phi = (k as f64 + 0.5) * dphi;
                        let pt = Vec2::new(sa * r * phi.cos(), sb * r * phi.sin());
                        if member(*t, &pt) {
                            acc += wt * wr * dphi * sa * sb * r * f(*t, &pt).abs().powf(p);
                        }
                    }
                }
            }
        }
    }
    acc.powf(1.0 / p)
}

/// Volume of `(0, T) × D` raised to `1/p`; the norm of `f ≡ 1`.
pub fn unit_norm(horizon: f64, domain: &DomainSpec, p: f64) -> f64 {
    (horizon * domain.volume()).powf(1.0 / p)
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn is<T: Send + Sync>() {}
    is::<DriftField>();
    is::<SpaceTimeVectorField>();
}
