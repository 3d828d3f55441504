//! Synthetic tensors with known low-rank structure.

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sketchtucker::htucker::{uniform_ranks, DimensionTree, HTuckerDecomposition};
use sketchtucker::linalg::{thin_q, Matrix};
use sketchtucker::sketch::{gaussian_matrix, RngStream};
use sketchtucker::tucker::TuckerDecomposition;
use sketchtucker::{DenseTensor, Error, Result, Shape};

/// Generator streams live far above the ids the decompositions use, so a
/// data seed and a method seed may coincide without sharing randomness.
const GEN_STREAM: u64 = 1 << 40;
const CORE_STREAM: u64 = GEN_STREAM - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CoreKind {
    /// I.i.d. uniform[0, 1] core, uniform factors.
    Uniform,
    /// Grid samples of `1/√(1 + Σ x_k²)` on `[0, 1]^d`, Gaussian factors.
    /// A stand-in for a smooth-function core, not a published formula.
    Smooth,
}

fn uniform_matrix(rows: usize, cols: usize, stream: RngStream) -> Matrix {
    let mut rng = stream.rng();
    let mut m = Mat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.random::<f64>();
        }
    }
    m
}

fn uniform_tensor(dims: &[usize], stream: RngStream) -> Result<DenseTensor> {
    let shape = Shape::new(dims.to_vec())?;
    let mut rng = stream.rng();
    let data = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
    DenseTensor::new(shape, data)
}

fn smooth_core(dims: &[usize]) -> Result<DenseTensor> {
    let shape = Shape::new(dims.to_vec())?;
    Ok(DenseTensor::from_fn(shape, |idx| {
        let r2: f64 = idx
            .iter()
            .zip(dims)
            .map(|(&i, &n)| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 })
            .map(|x| x * x)
            .sum();
        1.0 / (1.0 + r2).sqrt()
    }))
}

/// Planted Tucker tensor and its ground-truth decomposition.
pub fn gen_tucker(dims: &[usize], ranks: &[usize], kind: CoreKind, seed: u64) -> Result<(DenseTensor, TuckerDecomposition)> {
    if ranks.len() != dims.len() {
        return Err(Error::InvalidArgument(format!("{} ranks for {} modes", ranks.len(), dims.len())));
    }
    if let Some(k) = (0..dims.len()).find(|&k| ranks[k] == 0 || ranks[k] > dims[k]) {
        return Err(Error::InvalidArgument(format!("rank {} outside 1..={} in mode {k}", ranks[k], dims[k])));
    }
    let core = match kind {
        CoreKind::Uniform => uniform_tensor(ranks, RngStream::new(seed, CORE_STREAM))?,
        CoreKind::Smooth => smooth_core(ranks)?,
    };
    let factors = (0..dims.len())
        .map(|k| {
            let stream = RngStream::new(seed, GEN_STREAM + k as u64);
            let raw = match kind {
                CoreKind::Uniform => uniform_matrix(dims[k], ranks[k], stream),
                CoreKind::Smooth => gaussian_matrix(dims[k], ranks[k], stream),
            };
            thin_q(raw.as_ref())
        })
        .collect();
    let t = TuckerDecomposition::new(core, factors)?;
    Ok((t.reconstruct()?, t))
}

/// Planted H-Tucker tensor: orthonormalized uniform leaves and uniform
/// `(r, r, r)` transfer tensors (`(1, r, r)` at the root).
pub fn gen_htucker(dims: &[usize], tree: &DimensionTree, r: usize, seed: u64) -> Result<(DenseTensor, HTuckerDecomposition)> {
    if tree.order() != dims.len() {
        return Err(Error::InvalidArgument(format!("tree has {} modes, shape has {}", tree.order(), dims.len())));
    }
    if r == 0 || dims.iter().any(|&n| r > n) {
        return Err(Error::InvalidArgument(format!("rank {r} must lie in 1..={}", dims.iter().min().unwrap_or(&0))));
    }
    let ranks = uniform_ranks(tree, r);
    let leaves = dims
        .iter()
        .enumerate()
        .map(|(k, &n)| thin_q(uniform_matrix(n, r, RngStream::new(seed, GEN_STREAM + k as u64)).as_ref()))
        .collect();
    let mut transfers = Vec::with_capacity(tree.len());
    for id in 0..tree.len() {
        transfers.push(match tree.node(id).children {
            Some((l, rr)) => Some(uniform_tensor(
                &[ranks[id], ranks[l], ranks[rr]],
                RngStream::new(seed, GEN_STREAM + (dims.len() + id) as u64),
            )?),
            None => None,
        });
    }
    let h = HTuckerDecomposition::new(tree.clone(), leaves, transfers)?;
    Ok((h.reconstruct()?, h))
}
