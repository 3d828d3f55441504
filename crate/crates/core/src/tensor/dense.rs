use crate::error::{Error, Result};
use crate::tensor::shape::Shape;

/// Dense order-`d` tensor stored with the first index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "shape {shape} needs {} entries, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.len()];
        DenseTensor { shape, data }
    }

    /// Builds a tensor from a function of the 0-based multi-index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        let mut idx = vec![0usize; shape.order()];
        for _ in 0..shape.len() {
            data.push(f(&idx));
            advance(&mut idx, shape.dims());
        }
        DenseTensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat entries in linearization order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Entry at a 0-based multi-index.
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub(crate) fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order());
        let mut off = 0;
        let mut g = 1;
        for (&i, &n) in idx.iter().zip(self.dims()) {
            debug_assert!(i < n);
            off += i * g;
            g *= n;
        }
        off
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    /// Reinterprets the data under a new shape with the same entry count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        DenseTensor::new(shape, self.data)
    }
}

/// Increments a 0-based multi-index in linearization order (first index fastest).
pub(crate) fn advance(idx: &mut [usize], dims: &[usize]) {
    for (i, &n) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < n {
            return;
        }
        *i = 0;
    }
}

/// Scaled sum of squares, safe against overflow for large entries.
pub(crate) fn frobenius(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = values.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * sum.sqrt()
}

pub fn frobenius_norm(x: &DenseTensor) -> f64 {
    x.frobenius_norm()
}

/// `‖x - y‖_F / ‖x‖_F`.
pub fn rel_error(x: &DenseTensor, y: &DenseTensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "shapes differ: {} vs {}",
            x.shape(),
            y.shape()
        )));
    }
    let reference = x.frobenius_norm();
    if reference == 0.0 {
        return Err(Error::invalid("reference tensor has zero norm"));
    }
    let diff: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a - b).collect();
    Ok(frobenius(&diff) / reference)
}
