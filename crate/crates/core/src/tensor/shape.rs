//! Shapes, mode sets, and the linear/tuple index maps.
//!
//! Entries are linearized with the first index varying fastest: the 1-based
//! multi-index `(i_1, .., i_d)` lives at linear position
//! `i_1 + sum_{k>=2} (i_k - 1) * g_k` with `g_k = n_1 * .. * n_{k-1}`.
//! Modes are 0-based everywhere in the Rust API; multi-indices passed to
//! [`linear_index`] and returned by [`tuple_index`] are 1-based.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions `(n_1, .., n_d)` of a dense tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    dims: Vec<usize>,
    len: usize,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::invalid("a shape needs at least one mode"));
        }
        if let Some(k) = dims.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("mode {k} has size zero")));
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .filter(|&len| len <= isize::MAX as usize / std::mem::size_of::<f64>())
            .ok_or_else(|| Error::invalid(format!("shape {dims:?} is not addressable")))?;
        Ok(Shape { dims, len })
    }

    /// Order `d` of the tensor.
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    /// Total number of entries.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Strides `g_k` of the linearization (0-based modes, `g_0 = 1`).
    pub fn strides(&self) -> Vec<usize> {
        let mut g = Vec::with_capacity(self.dims.len());
        let mut acc = 1;
        for &n in &self.dims {
            g.push(acc);
            acc *= n;
        }
        g
    }

    pub fn stride(&self, k: usize) -> usize {
        self.dims[..k].iter().product()
    }

    /// `n_{≠k}`: number of mode-`k` fibers.
    pub fn complement_len(&self, k: usize) -> usize {
        self.len / self.dims[k]
    }

    /// Product of the sizes of the modes in `modes`.
    pub fn set_len(&self, modes: &ModeSet) -> usize {
        modes.iter().map(|m| self.dims[m]).product()
    }

    pub(crate) fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.order() {
            return Err(Error::invalid(format!(
                "mode {k} out of range for order-{} tensor",
                self.order()
            )));
        }
        Ok(())
    }

    /// Returns a copy with mode `k` resized to `n`.
    pub fn with_dim(&self, k: usize, n: usize) -> Result<Shape> {
        let mut dims = self.dims.clone();
        dims[k] = n;
        Shape::new(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.dims
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Linear index of a 1-based multi-index (result is 1-based).
pub fn linear_index(index: &[usize], shape: &Shape) -> Result<usize> {
    if index.len() != shape.order() {
        return Err(Error::bounds(format!(
            "multi-index has {} entries, shape has order {}",
            index.len(),
            shape.order()
        )));
    }
    let mut lin = 0usize;
    let mut g = 1usize;
    for (k, (&i, &n)) in index.iter().zip(shape.dims()).enumerate() {
        if i == 0 || i > n {
            return Err(Error::bounds(format!("entry {i} of mode {k} not in 1..={n}")));
        }
        lin += (i - 1) * g;
        g *= n;
    }
    Ok(lin + 1)
}

/// Inverse of [`linear_index`]: the 1-based multi-index at 1-based position `j`.
pub fn tuple_index(j: usize, shape: &Shape) -> Result<Vec<usize>> {
    if j == 0 || j > shape.len() {
        return Err(Error::bounds(format!("linear index {j} not in 1..={}", shape.len())));
    }
    let mut g = 1usize;
    Ok(shape
        .dims()
        .iter()
        .map(|&n| {
            let i = 1 + ((j - 1) % (n * g)) / g;
            g *= n;
            i
        })
        .collect())
}

/// Sorted, non-empty set of distinct 0-based modes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeSet(Vec<usize>);

impl ModeSet {
    pub fn new(modes: impl Into<Vec<usize>>) -> Result<Self> {
        let mut modes = modes.into();
        if modes.is_empty() {
            return Err(Error::invalid("mode set is empty"));
        }
        modes.sort_unstable();
        if modes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate modes in {modes:?}")));
        }
        Ok(ModeSet(modes))
    }

    pub fn singleton(k: usize) -> Self {
        ModeSet(vec![k])
    }

    /// All modes `0..d`.
    pub fn full(d: usize) -> Self {
        ModeSet((0..d).collect())
    }

    pub fn modes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Modes of `0..d` not in the set, ascending.
    pub fn complement(&self, d: usize) -> Vec<usize> {
        (0..d).filter(|&k| !self.contains(k)).collect()
    }

    /// Checks that the set is a non-empty proper subset of `0..d`.
    pub(crate) fn check_proper(&self, d: usize) -> Result<()> {
        if let Some(&m) = self.0.last() {
            if m >= d {
                return Err(Error::invalid(format!("mode {m} out of range for order {d}")));
            }
        }
        if self.0.len() == d {
            return Err(Error::invalid("mode set must be a proper subset of all modes"));
        }
        Ok(())
    }
}

impl fmt::Display for ModeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|m| (m + 1).to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}
