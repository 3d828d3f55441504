//! Dense matrix helpers on top of `faer`.
//!
//! All kernels run with `Par::Seq`: concurrency belongs to the executor, and
//! results must not depend on how many threads are available.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

use crate::error::{Error, Result};

/// Column-major dense matrix of `f64`.
pub type Matrix = Mat<f64>;

/// `a * b`.
pub fn mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Matrix {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `aᵀ * b`.
pub fn mul_tn(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Matrix {
    mul(a.transpose(), b)
}

/// Views a column-major slice as a matrix.
pub fn view(data: &[f64], nrows: usize, ncols: usize) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(data, nrows, ncols)
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    a.norm_l2()
}

/// Largest entry of `|aᵀa - I|`.
pub fn orthonormality_defect(a: MatRef<'_, f64>) -> f64 {
    let g = mul_tn(a, a);
    let mut worst = 0.0f64;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Leading singular triplets of a matrix.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

/// Full thin SVD, first reducing very tall or very wide inputs with a QR step.
fn thin_svd_reduced(a: MatRef<'_, f64>) -> Result<TruncatedSvd> {
    let (n, m) = (a.nrows(), a.ncols());
    let svd_err = |e| Error::Numerical(format!("SVD did not converge: {e:?}"));
    if m > 2 * n {
        // a = Rᵀ Qᵀ with Q R = aᵀ
        let qr = a.transpose().qr();
        let q = qr.compute_thin_Q();
        let rt = qr.thin_R().transpose().to_owned();
        let svd = rt.thin_svd().map_err(svd_err)?;
        Ok(TruncatedSvd {
            u: svd.U().to_owned(),
            s: svd.S().column_vector().iter().copied().collect(),
            v: mul(q.as_ref(), svd.V()),
        })
    } else if n > 2 * m {
        let qr = a.qr();
        let q = qr.compute_thin_Q();
        let r = qr.thin_R().to_owned();
        let svd = r.thin_svd().map_err(svd_err)?;
        Ok(TruncatedSvd {
            u: mul(q.as_ref(), svd.U()),
            s: svd.S().column_vector().iter().copied().collect(),
            v: svd.V().to_owned(),
        })
    } else {
        let svd = a.thin_svd().map_err(svd_err)?;
        Ok(TruncatedSvd {
            u: svd.U().to_owned(),
            s: svd.S().column_vector().iter().copied().collect(),
            v: svd.V().to_owned(),
        })
    }
}

/// Leading `t` singular triplets of `a`, singular values non-increasing.
pub fn truncated_svd(a: MatRef<'_, f64>, t: usize) -> Result<TruncatedSvd> {
    let k = a.nrows().min(a.ncols());
    if t > k {
        return Err(Error::invalid(format!(
            "rank {t} exceeds min dimension {k} of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let full = thin_svd_reduced(a)?;
    Ok(TruncatedSvd {
        u: full.u.subcols(0, t).to_owned(),
        s: full.s[..t].to_vec(),
        v: full.v.subcols(0, t).to_owned(),
    })
}

/// All `min(rows, cols)` singular values, non-increasing.
pub fn singular_values(a: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let (n, m) = (a.nrows(), a.ncols());
    let svd_err = |e| Error::Numerical(format!("SVD did not converge: {e:?}"));
    if m > 2 * n {
        a.transpose().qr().thin_R().singular_values().map_err(svd_err)
    } else if n > 2 * m {
        a.qr().thin_R().singular_values().map_err(svd_err)
    } else {
        a.singular_values().map_err(svd_err)
    }
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
pub fn thin_q(a: MatRef<'_, f64>) -> Matrix {
    a.qr().compute_thin_Q()
}

/// Orthogonalizes `v` against the columns of `basis` (two Gram-Schmidt passes).
/// Returns the remaining norm; `v` is normalized when that norm is positive.
pub(crate) fn orthogonalize_into(basis: MatRef<'_, f64>, v: &mut [f64]) -> f64 {
    let original = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..2 {
        for j in 0..basis.ncols() {
            let col = basis.col(j);
            let dot: f64 = (0..v.len()).map(|i| col[i] * v[i]).sum();
            for (i, x) in v.iter_mut().enumerate() {
                *x -= dot * col[i];
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    if original > 0.0 {
        norm / original
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { [3.0, 2.0, 1.0][i] } else { 0.0 });
        let svd = truncated_svd(a.as_ref(), 2).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-14);
        assert!((svd.s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn identity_gives_orthogonal_u() {
        let a = Mat::<f64>::identity(6, 6);
        let svd = truncated_svd(a.as_ref(), 6).unwrap();
        assert!(orthonormality_defect(svd.u.as_ref()) < 1e-14);
    }

    #[test]
    fn truncation_error_equals_tail_energy() {
        let a = random(20, 50, 7);
        let full = singular_values(a.as_ref()).unwrap();
        let svd = truncated_svd(a.as_ref(), 5).unwrap();
        let mut approx = Matrix::zeros(20, 50);
        for k in 0..5 {
            for j in 0..50 {
                for i in 0..20 {
                    approx[(i, j)] += svd.u[(i, k)] * svd.s[k] * svd.v[(j, k)];
                }
            }
        }
        let err2 = (&a - &approx).norm_l2().powi(2);
        let tail2: f64 = full[5..].iter().map(|s| s * s).sum();
        assert!((err2 - tail2).abs() <= 1e-10 * tail2);
    }

    #[test]
    fn reduction_paths_agree() {
        for (rows, cols) in [(4, 40), (40, 4), (10, 12)] {
            let a = random(rows, cols, 3);
            let svd = truncated_svd(a.as_ref(), 3).unwrap();
            let direct = a.thin_svd().unwrap();
            for k in 0..3 {
                assert!((svd.s[k] - direct.S().column_vector()[k]).abs() < 1e-12);
            }
            assert!(orthonormality_defect(svd.u.as_ref()) < 1e-13);
            assert!(orthonormality_defect(svd.v.as_ref()) < 1e-13);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let a = random(3, 5, 1);
        assert!(matches!(truncated_svd(a.as_ref(), 4), Err(Error::InvalidArgument(_))));
    }
}
