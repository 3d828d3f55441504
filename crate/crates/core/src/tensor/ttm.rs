//! Tensor-times-matrix products.
//!
//! Loops are written out by hand so the summation order for every output
//! entry is fixed (ascending over the contracted index) regardless of how the
//! tensor is sliced. That makes sliced and unsliced core computations agree
//! bit for bit.

use faer::MatRef;

use crate::error::{Error, Result};
use crate::tensor::dense::DenseTensor;

/// `X ×_k U` for `U` of shape `m × n_k`. The result has `m` in mode `k`.
pub fn ttm(x: &DenseTensor, u: MatRef<'_, f64>, k: usize) -> Result<DenseTensor> {
    x.shape().check_mode(k)?;
    let n = x.shape().dim(k);
    if u.ncols() != n {
        return Err(Error::invalid(format!(
            "ttm along mode {k}: matrix has {} columns, tensor dimension is {n}",
            u.ncols()
        )));
    }
    let m = u.nrows();
    if m == 0 {
        return Err(Error::invalid("ttm with a matrix that has no rows"));
    }
    let shape = x.shape().with_dim(k, m)?;
    let left = x.shape().stride(k);
    let right = x.len() / (left * n);
    // column-major copy so inner loops run over slices
    let mut uc = Vec::with_capacity(m * n);
    for i in 0..n {
        for j in 0..m {
            uc.push(u[(j, i)]);
        }
    }
    let mut out = vec![0.0; shape.len()];
    let xd = x.data();
    if left == 1 {
        for r in 0..right {
            let xs = &xd[r * n..(r + 1) * n];
            let os = &mut out[r * m..(r + 1) * m];
            for (i, &xv) in xs.iter().enumerate() {
                let ucol = &uc[i * m..(i + 1) * m];
                for (o, &uv) in os.iter_mut().zip(ucol) {
                    *o += uv * xv;
                }
            }
        }
    } else {
        for r in 0..right {
            for i in 0..n {
                let xs = &xd[(r * n + i) * left..(r * n + i + 1) * left];
                for j in 0..m {
                    let uv = uc[i * m + j];
                    let os = &mut out[(r * m + j) * left..(r * m + j + 1) * left];
                    for (o, &xv) in os.iter_mut().zip(xs) {
                        *o += uv * xv;
                    }
                }
            }
        }
    }
    DenseTensor::new(shape, out)
}

/// `X ×_k Uᵀ`, the usual projection onto a factor with orthonormal columns.
pub fn ttm_t(x: &DenseTensor, u: MatRef<'_, f64>, k: usize) -> Result<DenseTensor> {
    ttm(x, u.transpose(), k)
}

/// Applies the given products in list order. A mode may appear at most once.
pub fn multi_ttm(x: &DenseTensor, factors: &[(usize, MatRef<'_, f64>)]) -> Result<DenseTensor> {
    let mut seen = vec![false; x.order()];
    for &(k, _) in factors {
        x.shape().check_mode(k)?;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::invalid(format!("mode {k} appears twice in multi_ttm")));
        }
    }
    let mut cur: Option<DenseTensor> = None;
    for &(k, u) in factors {
        let next = ttm(cur.as_ref().unwrap_or(x), u, k)?;
        cur = Some(next);
    }
    Ok(cur.unwrap_or_else(|| x.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mul, Matrix};
    use crate::tensor::shape::Shape;
    use crate::tensor::unfold::unfold;
    use faer::Mat;
    use proptest::prelude::*;

    fn tensor(dims: &[usize], seed: u64) -> DenseTensor {
        let mut s = seed;
        DenseTensor::from_fn(Shape::new(dims.to_vec()).unwrap(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn matrix(m: usize, n: usize, seed: u64) -> Matrix {
        let t = tensor(&[m, n], seed);
        Mat::from_fn(m, n, |i, j| t.get(&[i, j]))
    }

    #[test]
    fn matrix_case_is_left_product() {
        let x = tensor(&[3, 4], 1);
        let u = matrix(5, 3, 2);
        let y = ttm(&x, u.as_ref(), 0).unwrap();
        let xm = Mat::from_fn(3, 4, |i, j| x.get(&[i, j]));
        let expected = mul(u.as_ref(), xm.as_ref());
        for i in 0..5 {
            for j in 0..4 {
                assert!((y.get(&[i, j]) - expected[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unfolding_identity_holds() {
        let x = tensor(&[3, 4, 2, 3], 3);
        for k in 0..4 {
            let u = matrix(2, x.dims()[k], 10 + k as u64);
            let y = ttm(&x, u.as_ref(), k).unwrap();
            let lhs = unfold(&y, k).unwrap();
            let rhs = mul(u.as_ref(), unfold(&x, k).unwrap().as_ref());
            assert!((&lhs - &rhs).norm_max() < 1e-13, "mode {k}");
        }
    }

    #[test]
    fn ones_row_gives_column_sums() {
        let x = DenseTensor::new(Shape::new(vec![2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = ttm(&x, Mat::from_fn(1, 2, |_, _| 1.0).as_ref(), 0).unwrap();
        assert_eq!(y.dims(), &[1, 2]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn empty_list_and_identities_return_input() {
        let x = tensor(&[2, 3, 4], 9);
        assert_eq!(multi_ttm(&x, &[]).unwrap(), x);
        let (i2, i4) = (Mat::<f64>::identity(2, 2), Mat::<f64>::identity(4, 4));
        assert_eq!(multi_ttm(&x, &[(0, i2.as_ref()), (2, i4.as_ref())]).unwrap(), x);
    }

    #[test]
    fn identity_factor_is_noop() {
        let x = tensor(&[2, 3, 4], 5);
        let y = ttm(&x, Mat::<f64>::identity(3, 3).as_ref(), 1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = tensor(&[2, 3], 1);
        assert!(matches!(ttm(&x, matrix(2, 2, 1).as_ref(), 1), Err(Error::InvalidArgument(_))));
        assert!(ttm(&x, matrix(2, 2, 1).as_ref(), 5).is_err());
        let u = matrix(2, 2, 1);
        assert!(multi_ttm(&x, &[(0, u.as_ref()), (0, u.as_ref())]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn distinct_modes_commute(seed in 0u64..1000, a in 1usize..4, b in 1usize..4) {
            let x = tensor(&[3, 2, 4], seed);
            let u = matrix(a, 3, seed + 1);
            let v = matrix(b, 4, seed + 2);
            let y1 = multi_ttm(&x, &[(0, u.as_ref()), (2, v.as_ref())]).unwrap();
            let y2 = multi_ttm(&x, &[(2, v.as_ref()), (0, u.as_ref())]).unwrap();
            prop_assert_eq!(y1.dims(), y2.dims());
            for (p, q) in y1.data().iter().zip(y2.data()) {
                prop_assert!((p - q).abs() < 1e-13);
            }
        }

        #[test]
        fn same_mode_composes(seed in 0u64..1000) {
            let x = tensor(&[3, 4, 2], seed);
            let u = matrix(3, 4, seed + 1);
            let v = matrix(2, 3, seed + 2);
            let y1 = ttm(&ttm(&x, u.as_ref(), 1).unwrap(), v.as_ref(), 1).unwrap();
            let y2 = ttm(&x, mul(v.as_ref(), u.as_ref()).as_ref(), 1).unwrap();
            for (p, q) in y1.data().iter().zip(y2.data()) {
                prop_assert!((p - q).abs() < 1e-13);
            }
        }
    }
}
