//! Explicit matricizations.
//!
//! These allocate a full copy of the tensor and exist as test oracles and for
//! the deterministic baselines. The Sub-R algorithms never call them; they go
//! through [`crate::tensor::fibers`] instead.

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::dense::{advance, DenseTensor};
use crate::tensor::shape::ModeSet;

const DEFAULT_UNFOLD_BYTE_CAP: usize = 2 << 30;

static UNFOLD_BYTE_CAP: AtomicUsize = AtomicUsize::new(DEFAULT_UNFOLD_BYTE_CAP);

/// Largest explicit unfolding (in bytes) the oracle paths will allocate.
pub fn unfold_byte_cap() -> usize {
    UNFOLD_BYTE_CAP.load(Ordering::Relaxed)
}

pub fn set_unfold_byte_cap(bytes: usize) {
    UNFOLD_BYTE_CAP.store(bytes, Ordering::Relaxed);
}

pub(crate) fn check_unfold_cap(x: &DenseTensor, what: &str) -> Result<()> {
    let requested = x.len() * std::mem::size_of::<f64>();
    let cap = unfold_byte_cap();
    if requested > cap {
        return Err(Error::ResourceCap {
            what: what.to_string(),
            requested,
            cap,
        });
    }
    Ok(())
}

/// Mode-`k` unfolding: an `n_k × n_{≠k}` matrix.
pub fn unfold(x: &DenseTensor, k: usize) -> Result<Matrix> {
    x.shape().check_mode(k)?;
    matricize(x, &ModeSet::singleton(k), "mode unfolding")
}

/// Unfolding along a proper mode subset: rows follow the linearization over
/// the modes of `set`, columns over the remaining modes, both ascending.
pub fn unfold_set(x: &DenseTensor, set: &ModeSet) -> Result<Matrix> {
    set.check_proper(x.order())?;
    matricize(x, set, "mode-set unfolding")
}

fn matricize(x: &DenseTensor, set: &ModeSet, what: &str) -> Result<Matrix> {
    check_unfold_cap(x, what)?;
    let dims = x.dims();
    // per mode: (goes to rows?, stride inside its own linearization)
    let mut row_stride = 1;
    let mut col_stride = 1;
    let placement: Vec<(bool, usize)> = dims
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            if set.contains(m) {
                let s = row_stride;
                row_stride *= n;
                (true, s)
            } else {
                let s = col_stride;
                col_stride *= n;
                (false, s)
            }
        })
        .collect();
    let (rows, cols) = (row_stride, col_stride);
    let mut out = Mat::zeros(rows, cols);
    let mut idx = vec![0usize; dims.len()];
    for &value in x.data() {
        let (mut r, mut c) = (0, 0);
        for (&i, &(is_row, s)) in idx.iter().zip(&placement) {
            if is_row {
                r += i * s;
            } else {
                c += i * s;
            }
        }
        out[(r, c)] = value;
        advance(&mut idx, dims);
    }
    Ok(out)
}
