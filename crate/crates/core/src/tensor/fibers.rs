//! Fiber gathers: pull selected columns of an unfolding straight out of the
//! tensor's storage without forming the unfolding.

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::dense::{advance, DenseTensor};
use crate::tensor::shape::ModeSet;

/// Columns `cols` (0-based, into `0..n_{≠k}`) of the mode-`k` unfolding.
pub fn extract_fibers(x: &DenseTensor, k: usize, cols: &[usize]) -> Result<Matrix> {
    x.shape().check_mode(k)?;
    let n = x.shape().dim(k);
    let total = x.shape().complement_len(k);
    let left = x.shape().stride(k);
    let data = x.data();
    let mut out = Mat::zeros(n, cols.len());
    for (c, &j) in cols.iter().enumerate() {
        if j >= total {
            return Err(Error::bounds(format!("fiber column {j} outside 0..{total}")));
        }
        let base = j % left + left * n * (j / left);
        let dst = out.col_as_slice_mut(c);
        for (i, v) in dst.iter_mut().enumerate() {
            *v = data[base + i * left];
        }
    }
    Ok(out)
}

/// Columns `cols` (0-based, into `0..n_{∉S}`) of the unfolding along `set`.
pub fn extract_group_fibers(x: &DenseTensor, set: &ModeSet, cols: &[usize]) -> Result<Matrix> {
    let d = x.order();
    set.check_proper(d)?;
    let dims = x.dims();
    let strides = x.shape().strides();
    let row_dims: Vec<usize> = set.iter().map(|m| dims[m]).collect();
    let row_strides: Vec<usize> = set.iter().map(|m| strides[m]).collect();
    let rest = set.complement(d);
    let rows: usize = row_dims.iter().product();
    let total: usize = rest.iter().map(|&m| dims[m]).product();

    let mut row_off = Vec::with_capacity(rows);
    let mut idx = vec![0usize; row_dims.len()];
    for _ in 0..rows {
        row_off.push(idx.iter().zip(&row_strides).map(|(i, s)| i * s).sum::<usize>());
        advance(&mut idx, &row_dims);
    }

    let data = x.data();
    let mut out = Mat::zeros(rows, cols.len());
    for (c, &j) in cols.iter().enumerate() {
        if j >= total {
            return Err(Error::bounds(format!("fiber column {j} outside 0..{total}")));
        }
        let mut rem = j;
        let mut base = 0;
        for &m in &rest {
            base += (rem % dims[m]) * strides[m];
            rem /= dims[m];
        }
        let dst = out.col_as_slice_mut(c);
        for (v, &off) in dst.iter_mut().zip(&row_off) {
            *v = data[base + off];
        }
    }
    Ok(out)
}
