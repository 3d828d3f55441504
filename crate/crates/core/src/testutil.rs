//! Shared fixtures for unit tests.

use faer::Mat;

use crate::linalg::{thin_q, Matrix};
use crate::sketch::{gaussian_matrix, RngStream};
use crate::tensor::{multi_ttm, DenseTensor, Shape};

pub fn random_tensor(dims: &[usize], seed: u64) -> DenseTensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let g = gaussian_matrix(shape.len(), 1, RngStream::new(seed, 999));
    DenseTensor::new(shape, g.col_as_slice(0).to_vec()).unwrap()
}

pub fn orthonormal(n: usize, r: usize, seed: u64) -> Matrix {
    thin_q(gaussian_matrix(n, r, RngStream::new(seed, 777)).as_ref())
}

/// Tensor of exact multilinear rank `ranks` with Gaussian core and orthonormal factors.
pub fn planted_tucker(dims: &[usize], ranks: &[usize], seed: u64) -> DenseTensor {
    let core = random_tensor(ranks, seed);
    let us: Vec<Matrix> = dims
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(k, (&n, &r))| orthonormal(n, r, seed.wrapping_mul(31).wrapping_add(k as u64)))
        .collect();
    let list: Vec<_> = us.iter().enumerate().map(|(k, u)| (k, u.as_ref())).collect();
    multi_ttm(&core, &list).unwrap()
}

pub fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
    Mat::from_fn(rows, cols, f)
}

/// H-Tucker tensor with orthonormal leaves and Gaussian transfer tensors.
pub fn planted_ht(
    dims: &[usize],
    r: usize,
    seed: u64,
) -> (crate::htucker::DimensionTree, crate::htucker::HTuckerDecomposition) {
    use crate::htucker::{uniform_ranks, DimensionTree, HTuckerDecomposition};
    let tree = DimensionTree::balanced(dims.len()).unwrap();
    let ranks = uniform_ranks(&tree, r);
    let leaves: Vec<Matrix> = dims.iter().enumerate().map(|(k, &n)| orthonormal(n, r, seed * 101 + k as u64)).collect();
    let transfers = (0..tree.len())
        .map(|id| {
            tree.node(id).children.map(|(l, rr)| random_tensor(&[ranks[id], ranks[l], ranks[rr]], seed * 103 + id as u64))
        })
        .collect();
    let h = HTuckerDecomposition::new(tree.clone(), leaves, transfers).unwrap();
    (tree, h)
}
