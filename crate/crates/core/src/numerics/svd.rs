//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and optimal rank-r
//! truncation on top of it.

use crate::error::{Error, Result};
use crate::numerics::tensor::{product, Tensor2D};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

/// Columns whose norm falls below this fraction of ‖W‖_F are treated as
/// numerically zero: they are not rotated and their left singular vector is
/// completed from the standard basis.
const NEGLIGIBLE: f64 = 1e-30;

/// `W = U · diag(sigma) · Vᵀ` with `p = min(m, n)` singular triplets.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor2D,
    pub sigma: Vec<f64>,
    pub vt: Tensor2D,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor2D {
        self.reconstruct_rank(self.sigma.len())
    }

    /// `U_r Σ_r V_rᵀ` from the leading `r` triplets.
    pub fn reconstruct_rank(&self, r: usize) -> Tensor2D {
        let m = self.u.rows();
        let us = Tensor2D::from_fn(m, r, |i, j| self.u.get(i, j) * self.sigma[j]);
        let vt = self.vt.row_range(0, r);
        product(&us, false, &vt, false)
    }
}

/// Thin SVD of `w`. The largest-magnitude entry of every left singular
/// vector is non-negative (first such entry on ties).
pub fn svd(w: &Tensor2D) -> Result<SvdResult> {
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let mut out = if w.rows() >= w.cols() {
        jacobi_tall(w)?
    } else {
        let t = jacobi_tall(&w.transpose())?;
        SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Best rank-`r` approximation in Frobenius (and spectral) norm.
pub fn rank_r_approx(w: &Tensor2D, r: usize) -> Result<Tensor2D> {
    let p = w.rows().min(w.cols());
    if r == 0 || r > p {
        return Err(Error::invalid(format!(
            "rank {r} outside 1..={p} for a {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    Ok(svd(w)?.reconstruct_rank(r))
}

fn jacobi_tall(w: &Tensor2D) -> Result<SvdResult> {
    let (m, n) = w.shape();
    // column-major working copy
    let mut a = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            a[j * m + i] = w.get(i, j);
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let fro = w.frobenius_norm();
    let floor_sq = (NEGLIGIBLE * fro).powi(2);
    let tol = (m as f64) * f64::EPSILON;

    let mut converged = fro == 0.0 || n == 1;
    let mut residual = 0.0;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &a[p * m..(p + 1) * m];
                    let cq = &a[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += cp[k] * cp[k];
                        beta += cq[k] * cq[k];
                        gamma += cp[k] * cq[k];
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= floor_sq || beta <= floor_sq {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = f64::max(residual, off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: sweep,
            residual,
        });
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| a[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let floor = floor_sq.sqrt();
    let mut u = Tensor2D::zeros(m, n);
    let mut vt = Tensor2D::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > floor && s > 0.0 {
            for i in 0..m {
                u.set(i, dst, a[src * m + i] / s);
            }
        } else {
            deficient.push(dst);
        }
        for k in 0..n {
            vt.set(dst, k, v[src * n + k]);
        }
    }
    complete_basis(&mut u, &deficient);
    Ok(SvdResult { u, sigma, vt })
}

/// Plane rotation of columns `p`, `q` of a column-major matrix with `len` rows.
fn rotate(x: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = x.split_at_mut(q * len);
    let cp = &mut lo[p * len..(p + 1) * len];
    let cq = &mut hi[..len];
    for k in 0..len {
        let xp = cp[k];
        let xq = cq[k];
        cp[k] = c * xp - s * xq;
        cq[k] = s * xp + c * xq;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every other
/// column, drawn from the standard basis by two-pass Gram–Schmidt.
fn complete_basis(u: &mut Tensor2D, missing: &[usize]) {
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &col in missing {
        loop {
            assert!(candidate < m, "basis completion exhausted");
            let mut x = vec![0.0; m];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &j in &filled {
                    let d: f64 = (0..m).map(|i| x[i] * u.get(i, j)).sum();
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi -= d * u.get(i, j);
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, xi) in x.iter().enumerate() {
                    u.set(i, col, xi / norm);
                }
                filled.push(col);
                break;
            }
        }
    }
}

fn fix_signs(s: &mut SvdResult) {
    let m = s.u.rows();
    for j in 0..s.sigma.len() {
        let mut best = 0;
        for i in 1..m {
            if s.u.get(i, j).abs() > s.u.get(best, j).abs() {
                best = i;
            }
        }
        if s.u.get(best, j) < 0.0 {
            for i in 0..m {
                let x = s.u.get(i, j);
                s.u.set(i, j, -x);
            }
            for k in 0..s.vt.cols() {
                let x = s.vt.get(j, k);
                s.vt.set(j, k, -x);
            }
        }
    }
}
