//! Sparse matrices, a line-relaxation preconditioner and BiCGSTAB.

use crate::{Error, Result};

/// Compressed sparse rows.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(col, value)` lists, merging duplicate columns.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in r {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }

    /// `y = A x`.
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            y[i] = s;
        }
    }

    /// `alpha·I + beta·A`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Csr {
        let mut out = self.clone();
        for i in 0..self.n {
            let mut has_diag = false;
            for p in out.row_ptr[i]..out.row_ptr[i + 1] {
                out.vals[p] *= beta;
                if out.cols[p] == i {
                    out.vals[p] += alpha;
                    has_diag = true;
                }
            }
            assert!(has_diag, "shifted() needs a structural diagonal");
        }
        out
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for p in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.cols[p] == j {
                return self.vals[p];
            }
        }
        0.0
    }
}

/// One line of unknowns, solved exactly as a (possibly cyclic) tridiagonal
/// system.
#[derive(Debug, Clone)]
struct Line {
    idx: Vec<usize>,
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    cyclic: bool,
}

/// Block preconditioner: exact tridiagonal solves along lines (the whole
/// 1-D grid, or each ring of a polar grid), ignoring couplings between lines.
#[derive(Debug, Clone)]
pub struct LinePreconditioner {
    lines: Vec<Line>,
}

impl LinePreconditioner {
    /// `lines[m]` lists the unknowns of line `m` in order; `cyclic` closes
    /// each line periodically.
    pub fn new(a: &Csr, lines: &[Vec<usize>], cyclic: bool) -> Self {
        let lines = lines
            .iter()
            .map(|idx| {
                let n = idx.len();
                let mut sub = vec![0.0; n];
                let mut diag = vec![0.0; n];
                let mut sup = vec![0.0; n];
                for m in 0..n {
                    let i = idx[m];
                    diag[m] = a.get(i, i);
                    if m > 0 || cyclic {
                        sub[m] = a.get(i, idx[(m + n - 1) % n]);
                    }
                    if m + 1 < n || cyclic {
                        sup[m] = a.get(i, idx[(m + 1) % n]);
                    }
                }
                Line { idx: idx.clone(), sub, diag, sup, cyclic: cyclic && n >= 3 }
            })
            .collect();
        LinePreconditioner { lines }
    }

    /// `z = P⁻¹ r`.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        for line in &self.lines {
            let rhs: Vec<f64> = line.idx.iter().map(|&i| r[i]).collect();
            let sol = if line.cyclic {
                cyclic_tridiag(&line.sub, &line.diag, &line.sup, &rhs)
            } else {
                thomas(&line.sub, &line.diag, &line.sup, &rhs)
            };
            for (m, &i) in line.idx.iter().enumerate() {
                z[i] = sol[m];
            }
        }
    }
}

/// Solves `sub_i x_{i−1} + diag_i x_i + sup_i x_{i+1} = d_i`.
pub fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut x = vec![0.0; n];
    cp[0] = sup[0] / diag[0];
    dp[0] = d[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * cp[i - 1];
        cp[i] = sup[i] / m;
        dp[i] = (d[i] - sub[i] * dp[i - 1]) / m;
    }
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Cyclic tridiagonal solve by Sherman–Morrison; `sub[0]` couples to
/// `x[n−1]` and `sup[n−1]` to `x[0]`.
pub fn cyclic_tridiag(sub: &[f64], diag: &[f64], sup: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let alpha = sup[n - 1];
    let beta = sub[0];
    let gamma = -diag[0];
    let mut bb = diag.to_vec();
    bb[0] = diag[0] - gamma;
    bb[n - 1] = diag[n - 1] - alpha * beta / gamma;
    let mut a2 = sub.to_vec();
    a2[0] = 0.0;
    let mut c2 = sup.to_vec();
    c2[n - 1] = 0.0;
    let x = thomas(&a2, &bb, &c2, d);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = thomas(&a2, &bb, &c2, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖b − Ax‖₂ / ‖b‖₂` of the returned iterate.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned BiCGSTAB; `x` holds the initial guess on entry.
pub fn bicgstab(a: &Csr, pre: &LinePreconditioner, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = a.n;
    let bnorm = norm(b);
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if bnorm == 0.0 {
        if norm(&r) == 0.0 {
            return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
    }
    let target = tol * bnorm;
    let mut rnorm = norm(&r);
    if rnorm <= target {
        return Ok(SolveStats { iterations: 0, relative_residual: rnorm / bnorm });
    }
    let r_hat = r.clone();
    let (mut rho_old, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho = dot(&r_hat, &r);
        if rho == 0.0 || !rho.is_finite() {
            return Err(Error::LinearSolveFailure { iterations: it, residual: rnorm / bnorm });
        }
        let beta = (rho / rho_old) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pre.apply(&p, &mut phat);
        a.mul(&phat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            a.mul(x, &mut r);
            let res = (0..n).map(|i| (b[i] - r[i]).powi(2)).sum::<f64>().sqrt();
            return Ok(SolveStats { iterations: it, relative_residual: res / bnorm });
        }
        pre.apply(&s, &mut shat);
        a.mul(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        rnorm = norm(&r);
        if rnorm <= target {
            a.mul(x, &mut t);
            let res = (0..n).map(|i| (b[i] - t[i]).powi(2)).sum::<f64>().sqrt();
            return Ok(SolveStats { iterations: it, relative_residual: res / bnorm });
        }
        if omega == 0.0 {
            return Err(Error::LinearSolveFailure { iterations: it, residual: rnorm / bnorm });
        }
        rho_old = rho;
    }
    Err(Error::LinearSolveFailure { iterations: max_iter, residual: rnorm / bnorm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_and_cyclic_solve() {
        let n = 7;
        let sub: Vec<f64> = (0..n).map(|i| -1.0 - 0.1 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 4.0 + i as f64).collect();
        let sup: Vec<f64> = (0..n).map(|i| -0.5 + 0.05 * i as f64).collect();
        let d: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = cyclic_tridiag(&sub, &diag, &sup, &d);
        for i in 0..n {
            let lhs = sub[i] * x[(i + n - 1) % n] + diag[i] * x[i] + sup[i] * x[(i + 1) % n];
            assert!((lhs - d[i]).abs() < 1e-13);
        }
        let x = thomas(&sub, &diag, &sup, &d);
        for i in 0..n {
            let mut lhs = diag[i] * x[i];
            if i > 0 {
                lhs += sub[i] * x[i - 1];
            }
            if i + 1 < n {
                lhs += sup[i] * x[i + 1];
            }
            assert!((lhs - d[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        // 2-D periodic-in-one-direction convection–diffusion block.
        let (nr, nc) = (6, 8);
        let id = |i: usize, k: usize| i * nc + (k % nc);
        let mut rows = vec![Vec::new(); nr * nc];
        for i in 0..nr {
            for k in 0..nc {
                let r = &mut rows[id(i, k)];
                r.push((id(i, k), 5.0));
                r.push((id(i, k + 1), -1.3));
                r.push((id(i, k + nc - 1), -0.7));
                if i > 0 {
                    r.push((id(i - 1, k), -1.1));
                }
                if i + 1 < nr {
                    r.push((id(i + 1, k), -0.9));
                }
            }
        }
        let a = Csr::from_rows(rows);
        let lines: Vec<Vec<usize>> = (0..nr).map(|i| (0..nc).map(|k| id(i, k)).collect()).collect();
        let pre = LinePreconditioner::new(&a, &lines, true);
        let b: Vec<f64> = (0..nr * nc).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut x = vec![0.0; nr * nc];
        let st = bicgstab(&a, &pre, &b, &mut x, 1e-12, 200).unwrap();
        assert!(st.relative_residual < 1e-11);
        let mut y = vec![0.0; nr * nc];
        a.mul(&x, &mut y);
        assert!(y.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-10));
    }

    #[test]
    fn exact_guess_needs_no_iterations() {
        let a = Csr::from_rows(vec![vec![(0, 2.0), (1, -1.0)], vec![(0, -1.0), (1, 2.0)]]);
        let pre = LinePreconditioner::new(&a, &[vec![0, 1]], false);
        let mut x = vec![1.0, 1.0];
        let st = bicgstab(&a, &pre, &[1.0, 1.0], &mut x, 1e-10, 10).unwrap();
        assert_eq!(st.iterations, 0);
    }
}
