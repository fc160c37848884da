//! Polynomial smoothsteps and cutoffs.

/// Quintic smoothstep `6τ⁵ − 15τ⁴ + 10τ³` clamped to `[0, 1]`.
///
/// First and second derivatives vanish at both ends, so cutoffs built from it
/// are `C²`.
#[inline]
pub fn smoothstep(tau: f64) -> f64 {
    if tau <= 0.0 {
        0.0
    } else if tau >= 1.0 {
        1.0
    } else {
        tau * tau * tau * (tau * (tau * 6.0 - 15.0) + 10.0)
    }
}

/// Derivative of [`smoothstep`].
#[inline]
pub fn smoothstep_deriv(tau: f64) -> f64 {
    if tau <= 0.0 || tau >= 1.0 {
        0.0
    } else {
        30.0 * tau * tau * (tau - 1.0) * (tau - 1.0)
    }
}

/// Cutoff equal to 1 for `s ≤ lo`, 0 for `s ≥ hi`, quintic in between.
#[inline]
pub fn cutoff(s: f64, lo: f64, hi: f64) -> f64 {
    1.0 - smoothstep((s - lo) / (hi - lo))
}

/// Derivative of [`cutoff`] with respect to `s`.
#[inline]
pub fn cutoff_deriv(s: f64, lo: f64, hi: f64) -> f64 {
    -smoothstep_deriv((s - lo) / (hi - lo)) / (hi - lo)
}
