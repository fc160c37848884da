//! Small Monte Carlo summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanEstimate { n, mean: f64::NAN, std_dev: f64::NAN, stderr: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std_dev = var.sqrt();
        MeanEstimate { n, mean, std_dev, stderr: std_dev / (n as f64).sqrt() }
    }

    /// Half-width of the symmetric interval `mean ± k·stderr`.
    pub fn half_width(&self, k: f64) -> f64 {
        k * self.stderr
    }

    /// `|mean − target| ≤ k·stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= self.half_width(k)
    }

    /// `mean / stderr`, zero when both vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Order of `y ~ C x^p` fitted in log-log; nonpositive entries are skipped.
pub fn loglog_order(x: &[f64], y: &[f64]) -> f64 {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).unzip();
    if lx.len() < 2 {
        return f64::NAN;
    }
    linear_fit(&lx, &ly).0
}

/// Pearson χ² goodness of fit against equal cell probabilities; returns
/// `(statistic, p-value)`.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let k = counts.len();
    let total: u64 = counts.iter().sum();
    let e = total as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("at least two cells");
    (stat, 1.0 - dist.cdf(stat))
}

/// Is the sequence of estimates nonincreasing up to overlap of `k·stderr`
/// intervals between consecutive entries?
pub fn nonincreasing_within_ci(ests: &[MeanEstimate], k: f64) -> bool {
    ests.windows(2).all(|w| w[1].mean - w[1].half_width(k) <= w[0].mean + w[0].half_width(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr() {
        let m = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std_dev - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.stderr - m.std_dev / 2.0).abs() < 1e-15);
        assert!(m.within(2.5, 0.0));
    }

    #[test]
    fn fits() {
        let x = [1.0, 2.0, 3.0];
        let y = [3.0, 5.0, 7.0];
        assert_eq!(linear_fit(&x, &y), (2.0, 1.0));
        let xs = [0.1, 0.01, 0.001];
        let ys: Vec<f64> = xs.iter().map(|v: &f64| 3.0 * v.sqrt()).collect();
        assert!((loglog_order(&xs, &ys) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chi_square() {
        let (s, p) = chi_square_uniform(&[100, 100, 100, 100]);
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_uniform(&[400, 0, 0, 0]);
        assert!(p < 1e-10);
    }

    #[test]
    fn ladder_monotonicity() {
        let e = |m, s| MeanEstimate { n: 10, mean: m, std_dev: 0.0, stderr: s };
        assert!(nonincreasing_within_ci(&[e(1.0, 0.1), e(1.1, 0.1), e(0.5, 0.1)], 1.0));
        assert!(!nonincreasing_within_ci(&[e(1.0, 0.01), e(1.1, 0.01)], 2.0));
    }
}
