//! Theory-facing instruments: coherence, tail energies, error-bound
//! evaluators and Monte-Carlo checks of the sampling and Gaussian lemmas.

use faer::{Mat, MatRef};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mul, orthonormality_defect, singular_values, thin_q, truncated_svd, Matrix};
use crate::sketch::{gaussian_matrix, sample_indices, RngStream};
use crate::tensor::{unfold, DenseTensor};

const THREE_HALVES: f64 = 5.196_152_422_706_632; // 3^{3/2}

/// Relative slack when comparing singular values against event thresholds.
const EVENT_SLACK: f64 = 1e-10;

/// Machine-readable outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub inputs: serde_json::Value,
    pub estimate: f64,
    pub bound: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Largest squared row norm of a matrix with orthonormal columns.
pub fn coherence(v: MatRef<'_, f64>) -> Result<f64> {
    if v.ncols() == 0 || v.nrows() == 0 {
        return Err(Error::invalid("coherence of an empty basis"));
    }
    let defect = orthonormality_defect(v);
    if defect > 1e-10 {
        return Err(Error::invalid(format!("columns are not orthonormal (defect {defect:.2e})")));
    }
    Ok((0..v.nrows())
        .map(|i| (0..v.ncols()).map(|j| v[(i, j)] * v[(i, j)]).sum::<f64>())
        .fold(0.0, f64::max))
}

fn check_delta_eta(delta: f64, eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid(format!("delta = {delta} must lie in [0, 1)")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta = {eta} must be non-negative")));
    }
    Ok(())
}

/// Per-mode inputs of the subsampled bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeBound {
    pub r: usize,
    pub p: usize,
    pub delta: f64,
    pub eta: f64,
}

impl ModeBound {
    fn term(&self) -> Result<f64> {
        check_delta_eta(self.delta, self.eta)?;
        let (r, p) = (self.r as f64, self.p as f64);
        Ok(THREE_HALVES * r * (1.0 + self.eta) * (r + p) / ((1.0 - self.delta) * (p + 1.0)))
    }
}

/// Conditional expected-error bound for one subsampled range finder:
/// `(1 + 3^{3/2} r(1+η)(r+p) / ((1−δ)(p+1)))^{1/2} · tail`.
pub fn bound_theorem33(mode: ModeBound, tail: f64) -> Result<f64> {
    Ok((1.0 + mode.term()?).sqrt() * tail)
}

/// Tucker version: `(d + Σ_k term_k)^{1/2} · best_error`, with `d = modes.len()`.
pub fn bound_theorem34(modes: &[ModeBound], best_error: f64) -> Result<f64> {
    let mut sum = modes.len() as f64;
    for m in modes {
        sum += m.term()?;
    }
    Ok(sum.sqrt() * best_error)
}

/// Expected-error factor of R-HOSVD: `(d + Σ r_k / (p − 1))^{1/2}`.
pub fn bound_rhosvd(ranks: &[usize], p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::invalid(format!("the randomized HOSVD bound needs p >= 2, got {p}")));
    }
    let sum: f64 = ranks.iter().map(|&r| r as f64 / (p as f64 - 1.0)).sum();
    Ok((ranks.len() as f64 + sum).sqrt())
}

/// Quasi-optimality factor `√(2d − 3)` of root-to-leaves HT truncation.
pub fn bound_rtl_ht(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::invalid("hierarchical Tucker needs at least two modes"));
    }
    Ok(((2 * d - 3) as f64).sqrt())
}

/// Failure probability of the two sampling events:
/// `r·(e^{−δ}/(1−δ)^{1−δ})^{s/M₁} + (n−r)·(e^{η}/(1+η)^{1+η})^{s/M₂}`.
pub fn lemma31_failure_bound(r: usize, n: usize, s: usize, m1: f64, m2: f64, delta: f64, eta: f64) -> Result<f64> {
    check_delta_eta(delta, eta)?;
    if r > n {
        return Err(Error::invalid(format!("rank {r} exceeds row count {n}")));
    }
    let s = s as f64;
    let lower = if delta == 0.0 { 1.0 } else { ((-delta).exp() / (1.0 - delta).powf(1.0 - delta)).powf(s / m1) };
    let upper = if eta == 0.0 { 1.0 } else { (eta.exp() / (1.0 + eta).powf(1.0 + eta)).powf(s / m2) };
    let second = if n > r { (n - r) as f64 * upper } else { 0.0 };
    Ok(r as f64 * lower + second)
}

/// `(δ, η)` minimizing [`lemma31_failure_bound`] over δ ∈ {0.1, …, 0.9} and
/// 25 log-spaced η from 0.1 to `m/s − 1`.
pub fn suggest_delta_eta(r: usize, n: usize, m: usize, s: usize, m1: f64, m2: f64) -> Result<(f64, f64, f64)> {
    let eta_max = m as f64 / s as f64 - 1.0;
    let etas: Vec<f64> = if eta_max <= 0.1 {
        vec![eta_max.max(0.0)]
    } else {
        let steps = 24;
        (0..=steps).map(|i| 0.1 * (eta_max / 0.1).powf(i as f64 / steps as f64)).collect()
    };
    let mut best = (0.1, etas[0], f64::INFINITY);
    for i in 1..=9 {
        let delta = i as f64 / 10.0;
        for &eta in &etas {
            let f = lemma31_failure_bound(r, n, s, m1, m2, delta, eta)?;
            if f < best.2 {
                best = (delta, eta, f);
            }
        }
    }
    Ok(best)
}

/// Outcome of [`lemma31_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma31Report {
    pub trials: usize,
    pub lower_failures: usize,
    pub upper_failures: usize,
    /// Fraction of trials where at least one event failed.
    pub failure_rate: f64,
    pub standard_error: f64,
    pub bound: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Lemma31Report {
    /// Empirical failure within three standard errors of the closed-form bound.
    pub fn within_bound(&self) -> bool {
        self.failure_rate <= self.bound + 3.0 * self.standard_error
    }
}

/// Samples `s` columns of the fat matrix `x` (`n × m`) `trials` times and
/// counts how often `σ_r(V₁ᵀE) ≥ √((1−δ)s/m)` or `σ₁(V₂ᵀE) ≤ √((1+η)s/m)`
/// fails, where `V₁`, `V₂` are the leading `r` and remaining right singular vectors.
pub fn lemma31_check(x: &Matrix, r: usize, s: usize, delta: f64, eta: f64, trials: usize, seed: u64) -> Result<Lemma31Report> {
    check_delta_eta(delta, eta)?;
    let (n, m) = (x.nrows(), x.ncols());
    if n > m {
        return Err(Error::invalid(format!("expected a fat matrix, got {n}x{m}")));
    }
    if r == 0 || r > n || s > m || trials == 0 {
        return Err(Error::invalid(format!("invalid lemma check parameters r={r}, s={s}, trials={trials}")));
    }
    let svd = truncated_svd(x.as_ref(), n)?;
    let v1 = svd.v.subcols(0, r).to_owned();
    let v2 = svd.v.subcols(r, n - r).to_owned();
    let m1 = m as f64 * coherence(v1.as_ref())?;
    let m2 = if n > r { m as f64 * coherence(v2.as_ref())? } else { 1.0 };
    let lo = ((1.0 - delta) * s as f64 / m as f64).sqrt() * (1.0 - EVENT_SLACK);
    let hi = ((1.0 + eta) * s as f64 / m as f64).sqrt() * (1.0 + EVENT_SLACK);

    let (mut lower_failures, mut upper_failures, mut any) = (0, 0, 0);
    for t in 0..trials {
        let idx = sample_indices(m, s, RngStream::new(seed, t as u64))?;
        let rows = |v: &Matrix| Mat::from_fn(idx.len(), v.ncols(), |i, j| v[(idx[i], j)]);
        let s1 = singular_values(rows(&v1).as_ref())?;
        let low_fail = s1.get(r - 1).is_none_or(|&v| v < lo);
        let high_fail = n > r && singular_values(rows(&v2).as_ref())?.first().is_some_and(|&v| v > hi);
        lower_failures += usize::from(low_fail);
        upper_failures += usize::from(high_fail);
        any += usize::from(low_fail || high_fail);
    }
    let rate = any as f64 / trials as f64;
    Ok(Lemma31Report {
        trials,
        lower_failures,
        upper_failures,
        failure_rate: rate,
        standard_error: (rate * (1.0 - rate) / trials as f64).sqrt(),
        bound: lemma31_failure_bound(r, n, s, m1, m2, delta, eta)?,
        m1,
        m2,
    })
}

/// `n × m` matrix with orthonormalized Gaussian row space and singular values
/// `1, …, 1` (first `r`) then `0.1`. Its right singular vectors are incoherent.
pub fn incoherent_matrix(n: usize, m: usize, r: usize, seed: u64) -> Matrix {
    let v = thin_q(gaussian_matrix(m, n, RngStream::new(seed, 1)).as_ref());
    spectrum_matrix(&v, r, seed)
}

/// Like [`incoherent_matrix`] but the leading right singular vectors are the
/// first `r` canonical basis vectors, so `V₁` has coherence 1.
pub fn coherent_matrix(n: usize, m: usize, r: usize, seed: u64) -> Matrix {
    let mut g = gaussian_matrix(m, n, RngStream::new(seed, 1));
    for j in 0..n {
        let rows = if j < r { 0..m } else { 0..r };
        for i in rows {
            g[(i, j)] = if i == j { 1.0 } else { 0.0 };
        }
    }
    let v = thin_q(g.as_ref());
    spectrum_matrix(&v, r, seed)
}

fn spectrum_matrix(v: &Matrix, r: usize, seed: u64) -> Matrix {
    let n = v.ncols();
    let u = thin_q(gaussian_matrix(n, n, RngStream::new(seed, 2)).as_ref());
    let us = Mat::from_fn(n, n, |i, j| u[(i, j)] * if j < r { 1.0 } else { 0.1 });
    mul(us.as_ref(), v.transpose())
}

/// Outcome of [`prop_a1_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropA1Report {
    pub trials: usize,
    /// Monte-Carlo estimate of `E[‖SGT‖_F⁴]^{1/4}`.
    pub estimate: f64,
    pub standard_error: f64,
    /// `3^{1/4} ‖S‖_F ‖T‖_F`.
    pub bound: f64,
    /// Closed form `(‖S‖⁴‖T‖⁴ + 2 Σσ_i(S)⁴ Σσ_j(T)⁴)^{1/4}`.
    pub exact: f64,
}

impl PropA1Report {
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.bound + 3.0 * self.standard_error
    }
}

/// Estimates `E[‖SGT‖_F⁴]^{1/4}` for standard Gaussian `G` and compares it with
/// `3^{1/4}‖S‖_F‖T‖_F`. The standard error follows from the delta method.
pub fn prop_a1_check(s: &Matrix, t: &Matrix, trials: usize, seed: u64) -> Result<PropA1Report> {
    if trials < 2 {
        return Err(Error::invalid("at least two trials are needed"));
    }
    let (b, c) = (s.ncols(), t.nrows());
    let mut rng = RngStream::new(seed, 0).rng();
    let mut g = Mat::<f64>::zeros(b, c);
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        for j in 0..c {
            for v in g.col_as_slice_mut(j) {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let f2 = mul(mul(s.as_ref(), g.as_ref()).as_ref(), t.as_ref()).norm_l2().powi(2);
        values.push(f2 * f2);
    }
    let n = trials as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var / n).sqrt();
    let estimate = mean.powf(0.25);
    let standard_error = if mean > 0.0 { se_mean / (4.0 * mean.powf(0.75)) } else { 0.0 };

    let (ns, nt) = (s.norm_l2(), t.norm_l2());
    let fourth = |m: &Matrix| -> Result<f64> { Ok(singular_values(m.as_ref())?.iter().map(|v| v.powi(4)).sum()) };
    let exact = (ns.powi(4) * nt.powi(4) + 2.0 * fourth(s)? * fourth(t)?).powf(0.25);
    Ok(PropA1Report { trials, estimate, standard_error, bound: 3f64.powf(0.25) * ns * nt, exact })
}

/// Per-mode singular values beyond the target rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSpectrum {
    pub per_mode: Vec<Vec<f64>>,
    /// `√(Σ_k Σ_{i>r_k} σ_i(X_(k))²)`.
    pub aggregate: f64,
}

/// Tail singular values of every mode unfolding (full SVDs; small inputs only).
pub fn tail_energy(x: &DenseTensor, ranks: &[usize]) -> Result<TailSpectrum> {
    if ranks.len() != x.order() {
        return Err(Error::invalid(format!("{} ranks for an order-{} tensor", ranks.len(), x.order())));
    }
    let mut per_mode = Vec::with_capacity(ranks.len());
    for (k, &r) in ranks.iter().enumerate() {
        let sv = singular_values(unfold(x, k)?.as_ref())?;
        per_mode.push(sv.get(r..).map(<[f64]>::to_vec).unwrap_or_default());
    }
    let aggregate = per_mode.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    Ok(TailSpectrum { per_mode, aggregate })
}
