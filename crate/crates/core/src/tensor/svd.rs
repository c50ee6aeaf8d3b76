//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use crate::error::{HingeError, Result};
use crate::tensor::DenseMatrix;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// `m = U · diag(singular_values) · vt` with `k = min(rows, cols)` factors.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            let row = us.row_mut(i);
            for j in 0..k {
                row[j] *= self.singular_values[j];
            }
        }
        crate::tensor::matrix::matmul_tn(&us.transpose(), &self.vt)
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    m.ensure_finite("svd input")?;
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        })
    }
}

fn svd_tall(m: &DenseMatrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    // Columns of the working matrix are kept as contiguous rows of `g`.
    let mut g = m.transpose();
    let mut v = DenseMatrix::identity(n);

    let mut converged = n < 2;
    let mut worst = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        worst = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let gp = g.row(p);
                    let gq = g.row(q);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut c = 0.0;
                    for (x, y) in gp.iter().zip(gq) {
                        a += x * x;
                        b += y * y;
                        c += x * y;
                    }
                    (a, b, c)
                };
                if gamma == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale;
                worst = worst.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut g, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(HingeError::numeric(format!(
            "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps (max relative off-diagonal {worst:.3e})"
        )));
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| g.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms[order[0]];
    let negligible = sigma_max * (rows.max(n) as f64) * f64::EPSILON;

    let mut ut = DenseMatrix::zeros(n, rows);
    let mut vt = DenseMatrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        vt.row_mut(k).copy_from_slice(v.row(j));
        if sigma > negligible && sigma > 0.0 {
            let dst = ut.row_mut(k);
            for (d, s) in dst.iter_mut().zip(g.row(j)) {
                *d = s / sigma;
            }
        } else {
            deficient.push(k);
        }
    }
    complete_orthonormal_rows(&mut ut, &deficient);

    Ok(SvdResult {
        u: ut.transpose(),
        singular_values,
        vt,
    })
}

fn rotate_rows(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed rows with unit vectors orthogonal to every other row.
fn complete_orthonormal_rows(ut: &mut DenseMatrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = ut.cols();
    let mut filled: Vec<usize> = (0..ut.rows()).filter(|r| !missing.contains(r)).collect();
    for &target in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for &r in &filled {
                    let basis = ut.row(r);
                    let dot: f64 = basis.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, b) in cand.iter_mut().zip(basis) {
                        *c -= dot * b;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("dimension is non-zero");
        let row = ut.row_mut(target);
        for (d, c) in row.iter_mut().zip(&cand) {
            *d = c / norm;
        }
        filled.push(target);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(rows_as_vectors: &DenseMatrix) -> f64 {
        let gram = matmul(rows_as_vectors, &rows_as_vectors.transpose()).unwrap();
        let eye = DenseMatrix::identity(gram.rows());
        gram.sub(&eye).unwrap().max_abs()
    }

    #[test]
    fn identity() {
        let r = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(r.singular_values, vec![1.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.u[(i, j)].abs() - expect).abs() < 1e-15);
                assert!((r.vt[(i, j)].abs() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal() {
        let r = svd(&DenseMatrix::from_diag(&[3.0, 2.0])).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 2.0]);
        let r = svd(&DenseMatrix::from_diag(&[2.0, 3.0])).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 2.0]);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, n) in &[(6, 4), (4, 6), (64, 64), (40, 9), (1, 5), (5, 1)] {
            let a = DenseMatrix::random_normal(m, n, 1.0, &mut rng);
            let r = svd(&a).unwrap();
            let rel = r.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel <= 1e-10, "{m}x{n}: residual {rel}");
            assert!(orthonormality_error(&r.u.transpose()) <= 1e-10);
            assert!(orthonormality_error(&r.vt) <= 1e-10);
            assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        // Two identical columns and one zero column.
        let a = DenseMatrix::from_rows(&[
            &[1.0, 1.0, 0.0],
            &[2.0, 2.0, 0.0],
            &[0.5, 0.5, 0.0],
            &[1.0, 1.0, 0.0],
        ]);
        let r = svd(&a).unwrap();
        assert!(r.singular_values[1] < 1e-12 && r.singular_values[2] == 0.0);
        assert!(orthonormality_error(&r.u.transpose()) <= 1e-10);
        let rel = r.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel <= 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let r = svd(&DenseMatrix::zeros(4, 3)).unwrap();
        assert!(r.singular_values.iter().all(|&s| s == 0.0));
        assert!(orthonormality_error(&r.u.transpose()) <= 1e-12);
    }
}
