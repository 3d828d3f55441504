//! Random fiber sampling, Gaussian test matrices and range finders.

use faer::Mat;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mul, mul_tn, orthogonalize_into, truncated_svd, Matrix, TruncatedSvd};

/// Oversampling used when none is given.
pub const DEFAULT_OVERSAMPLE: usize = 4;

/// Substream tags used inside one mode or tree node.
pub mod tags {
    pub const SAMPLING: u64 = 0;
    pub const SKETCH: u64 = 1;
    pub const PADDING: u64 = 2;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(root_seed, stream_id)`.
///
/// The generator is ChaCha8 keyed by the root seed with the stream id selecting
/// the ChaCha stream, so draws never depend on which thread runs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub root_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self { root_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Deterministically derived child stream.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            root_seed: self.root_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5151))),
        }
    }
}

/// How many fibers to sample for a mode or tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleRule {
    /// The same count everywhere.
    Count(usize),
    /// One count per mode (Tucker) or per tree node (H-Tucker, heap order).
    PerTarget(Vec<usize>),
    /// `min(α · n_rows, n_cols)`.
    Alpha(f64),
}

impl SampleRule {
    pub fn resolve(&self, target: usize, n_rows: usize, n_cols: usize) -> Result<usize> {
        let s = match self {
            SampleRule::Count(s) => *s,
            SampleRule::PerTarget(v) => *v.get(target).ok_or_else(|| {
                Error::invalid(format!("no sample count given for target {target}"))
            })?,
            SampleRule::Alpha(alpha) => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::invalid(format!("sampling coefficient {alpha} must be positive")));
                }
                let s = (alpha * n_rows as f64).floor();
                if s >= n_cols as f64 {
                    n_cols
                } else {
                    (s as usize).max(1)
                }
            }
        };
        Ok(s)
    }
}

/// Sampling and sketching parameters shared by the Sub-R methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub samples: SampleRule,
    pub oversample: usize,
    pub seed: u64,
    pub partitions: usize,
}

impl SketchConfig {
    pub fn new(samples: SampleRule, seed: u64) -> Self {
        Self { samples, oversample: DEFAULT_OVERSAMPLE, seed, partitions: 1 }
    }
}

/// `s` distinct indices drawn uniformly from `0..m`, in draw order.
pub fn sample_indices(m: usize, s: usize, stream: RngStream) -> Result<Vec<usize>> {
    if s > m {
        return Err(Error::invalid(format!("cannot sample {s} distinct indices from {m}")));
    }
    Ok(index::sample(&mut stream.rng(), m, s).into_vec())
}

/// Boundaries and per-interval counts for partitioned sampling.
pub fn partition_plan(m: usize, s: usize, parts: usize) -> Result<Vec<(usize, usize, usize)>> {
    if parts == 0 || parts > s {
        return Err(Error::invalid(format!("{parts} partitions for {s} samples")));
    }
    if s > m {
        return Err(Error::invalid(format!("cannot sample {s} distinct indices from {m}")));
    }
    let width = m / parts;
    let base = s / parts;
    let plan: Vec<_> = (0..parts)
        .map(|i| {
            let start = i * width;
            let end = if i + 1 == parts { m } else { start + width };
            let count = if i + 1 == parts { base + s % parts } else { base };
            (start, end, count)
        })
        .collect();
    if let Some(&(start, end, count)) = plan.iter().find(|&&(a, b, c)| c > b - a) {
        return Err(Error::invalid(format!(
            "interval {start}..{end} cannot supply {count} distinct samples"
        )));
    }
    Ok(plan)
}

/// Samples independently from `parts` contiguous sub-intervals of `0..m`.
///
/// The first `parts - 1` intervals contribute `⌊s/parts⌋` indices and the last
/// absorbs the remainder. Each interval has its own substream, so the result
/// does not depend on whether intervals are drawn concurrently.
pub fn sample_indices_partitioned(m: usize, s: usize, parts: usize, stream: RngStream) -> Result<Vec<usize>> {
    let plan = partition_plan(m, s, parts)?;
    if parts == 1 {
        return sample_indices(m, s, stream);
    }
    let chunks: Vec<Vec<usize>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(start, end, count))| {
            let mut rng = stream.substream(i as u64).rng();
            index::sample(&mut rng, end - start, count)
                .into_iter()
                .map(|j| j + start)
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

/// `rows × cols` matrix of i.i.d. standard normal entries, filled column by column.
pub fn gaussian_matrix(rows: usize, cols: usize, stream: RngStream) -> Matrix {
    let mut rng = stream.rng();
    let mut out = Mat::zeros(rows, cols);
    for j in 0..cols {
        for v in out.col_as_slice_mut(j) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    out
}

/// Orthonormal basis returned by [`range_finder`].
#[derive(Debug, Clone)]
pub struct RangeBasis {
    pub q: Matrix,
    /// Numerical rank detected in the sketch, capped at the requested rank.
    pub achieved_rank: usize,
}

fn numerical_rank(s: &[f64], rows: usize, cols: usize) -> usize {
    let Some(&top) = s.first() else { return 0 };
    if top <= 0.0 {
        return 0;
    }
    let tol = rows.max(cols) as f64 * f64::EPSILON * top;
    s.iter().take_while(|&&v| v > tol).count()
}

fn check_sketch_args(y: &Matrix, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::invalid("target rank must be positive"));
    }
    if r > y.nrows() || r > y.ncols() {
        return Err(Error::invalid(format!(
            "target rank {r} exceeds the dimensions of a {}x{} matrix",
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Gaussian sketch `Z = YΩ` with `width` columns, drawn from `stream`.
pub fn sketch(y: &Matrix, width: usize, stream: RngStream) -> Matrix {
    let omega = gaussian_matrix(y.ncols(), width, stream);
    mul(y.as_ref(), omega.as_ref())
}

/// All `min(rows, width)` left singular vectors of a `width`-column sketch.
pub fn sketch_basis(y: &Matrix, width: usize, stream: RngStream) -> Result<Matrix> {
    let z = sketch(y, width, stream);
    let t = z.nrows().min(z.ncols());
    Ok(truncated_svd(z.as_ref(), t)?.u)
}

/// `r` leading left singular vectors of `YΩ`, with `Ω` Gaussian of width `r + p`.
///
/// When the sketch has numerical rank below `r`, the basis is completed with
/// fresh Gaussian directions orthogonalized against it, and a warning is logged.
pub fn range_finder(y: &Matrix, r: usize, p: usize, stream: RngStream) -> Result<RangeBasis> {
    check_sketch_args(y, r)?;
    let z = sketch(y, r + p, stream);
    basis_from_sketch(&z, r, stream.substream(tags::PADDING))
}

/// Second half of [`range_finder`]: the `r` leading left singular vectors of
/// an already formed sketch `z`, padded from `pad` if `z` is rank deficient.
pub fn basis_from_sketch(z: &Matrix, r: usize, pad: RngStream) -> Result<RangeBasis> {
    if r == 0 || r > z.nrows() {
        return Err(Error::invalid(format!("target rank {r} invalid for {} rows", z.nrows())));
    }
    let svd = truncated_svd(z.as_ref(), z.nrows().min(z.ncols()))?;
    let achieved = numerical_rank(&svd.s, z.nrows(), z.ncols()).min(r);
    let mut q = svd.u.subcols(0, achieved).to_owned();
    if achieved < r {
        log::warn!("sketch has numerical rank {achieved} < {r}; padding the basis");
        q = pad_basis(q, r, pad)?;
    }
    Ok(RangeBasis { q, achieved_rank: achieved })
}

/// Extends an orthonormal `q` to `r` columns with random orthonormal directions.
fn pad_basis(q: Matrix, r: usize, stream: RngStream) -> Result<Matrix> {
    let n = q.nrows();
    let mut rng = stream.rng();
    let mut cols: Vec<Vec<f64>> = (0..q.ncols()).map(|j| q.col_as_slice(j).to_vec()).collect();
    let mut attempts = 0;
    while cols.len() < r {
        attempts += 1;
        if attempts > 10 * r + 100 {
            return Err(Error::Numerical("could not complete an orthonormal basis".into()));
        }
        let current = Mat::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        if orthogonalize_into(current.as_ref(), &mut v) > 1e-6 {
            cols.push(v);
        }
    }
    Ok(Mat::from_fn(n, r, |i, j| cols[j][i]))
}

/// Randomized SVD: project onto the full `r + p` sketch basis, then take the
/// leading `r` triplets of the small projected matrix.
pub fn randomized_svd(a: &Matrix, r: usize, p: usize, stream: RngStream) -> Result<(TruncatedSvd, usize)> {
    check_sketch_args(a, r)?;
    let q = sketch_basis(a, r + p, stream)?;
    let b = mul_tn(q.as_ref(), a.as_ref());
    let small = truncated_svd(b.as_ref(), r)?;
    let achieved = numerical_rank(&small.s, a.nrows(), a.ncols()).min(r);
    if achieved < r {
        log::warn!("randomized SVD found numerical rank {achieved} < {r}");
    }
    let u = mul(q.as_ref(), small.u.as_ref());
    Ok((TruncatedSvd { u, s: small.s, v: small.v }, achieved))
}
