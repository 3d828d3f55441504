//! Tucker decompositions: T-HOSVD, ST-HOSVD, R-HOSVD and Sub-R-HOSVD.

use faer::MatRef;

use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::parallel::{parallel_factors, sliced_core, ExecPolicy, JobCtx, Stage, StageTimings};
use crate::sketch::{
    basis_from_sketch, randomized_svd, sample_indices_partitioned, sketch, tags, RangeBasis, RngStream, SketchConfig,
    DEFAULT_OVERSAMPLE,
};
use crate::tensor::{extract_fibers, multi_ttm, ttm_t, unfold, DenseTensor};

/// Core tensor plus one orthonormal factor per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerDecomposition {
    core: DenseTensor,
    factors: Vec<Matrix>,
}

impl TuckerDecomposition {
    pub fn new(core: DenseTensor, factors: Vec<Matrix>) -> Result<Self> {
        if factors.len() != core.order() {
            return Err(Error::invalid(format!(
                "{} factors for an order-{} core",
                factors.len(),
                core.order()
            )));
        }
        for (k, u) in factors.iter().enumerate() {
            if u.ncols() != core.dims()[k] {
                return Err(Error::invalid(format!(
                    "factor {k} has {} columns but the core has {} in that mode",
                    u.ncols(),
                    core.dims()[k]
                )));
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.dims().to_vec()
    }

    /// Dimensions of the represented tensor.
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|u| u.nrows()).collect()
    }

    /// Number of stored scalars.
    pub fn storage_count(&self) -> usize {
        self.core.len() + self.factors.iter().map(|u| u.nrows() * u.ncols()).sum::<usize>()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        reconstruct(self)
    }
}

/// `S ×_1 U_1 ⋯ ×_d U_d`.
pub fn reconstruct(t: &TuckerDecomposition) -> Result<DenseTensor> {
    let list: Vec<(usize, MatRef<'_, f64>)> = t.factors.iter().enumerate().map(|(k, u)| (k, u.as_ref())).collect();
    multi_ttm(&t.core, &list)
}

/// Result of a decomposition run with bookkeeping for reports.
#[derive(Debug, Clone)]
pub struct TuckerRun {
    pub decomposition: TuckerDecomposition,
    /// Numerical rank found per mode (equal to the target unless padding kicked in).
    pub achieved_ranks: Vec<usize>,
    /// Fibers sampled per mode, for the sampled methods.
    pub samples: Option<Vec<usize>>,
    pub timings: StageTimings,
}

fn check_ranks(x: &DenseTensor, ranks: &[usize]) -> Result<()> {
    if ranks.len() != x.order() {
        return Err(Error::invalid(format!("{} ranks for an order-{} tensor", ranks.len(), x.order())));
    }
    for (k, &r) in ranks.iter().enumerate() {
        let limit = x.shape().dim(k).min(x.shape().complement_len(k));
        if r == 0 || r > limit {
            return Err(Error::invalid(format!("rank {r} for mode {k} outside 1..={limit}")));
        }
    }
    Ok(())
}

/// `X ×_1 U_1ᵀ ⋯ ×_d U_dᵀ` in ascending mode order.
pub fn project_core(x: &DenseTensor, factors: &[Matrix]) -> Result<DenseTensor> {
    let ts: Vec<Matrix> = factors.iter().map(|u| u.transpose().to_owned()).collect();
    let list: Vec<(usize, MatRef<'_, f64>)> = ts.iter().enumerate().map(|(k, t)| (k, t.as_ref())).collect();
    multi_ttm(x, &list)
}

/// Truncated higher-order SVD: each factor from the full mode unfolding.
pub fn t_hosvd(x: &DenseTensor, ranks: &[usize]) -> Result<TuckerDecomposition> {
    check_ranks(x, ranks)?;
    let factors = ranks
        .iter()
        .enumerate()
        .map(|(k, &r)| Ok(truncated_svd(unfold(x, k)?.as_ref(), r)?.u))
        .collect::<Result<Vec<_>>>()?;
    let core = project_core(x, &factors)?;
    TuckerDecomposition::new(core, factors)
}

/// Sequentially truncated HOSVD: after each factor the working tensor is
/// replaced by its projection, so later unfoldings are smaller.
pub fn st_hosvd(x: &DenseTensor, ranks: &[usize], mode_order: Option<&[usize]>) -> Result<TuckerDecomposition> {
    check_ranks(x, ranks)?;
    let d = x.order();
    let default: Vec<usize> = (0..d).collect();
    let order = mode_order.unwrap_or(&default);
    let mut seen = vec![false; d];
    if order.len() != d || order.iter().any(|&k| k >= d || std::mem::replace(&mut seen[k], true)) {
        return Err(Error::invalid(format!("mode order {order:?} is not a permutation of 0..{d}")));
    }
    let mut factors: Vec<Option<Matrix>> = vec![None; d];
    let mut work = x.clone();
    for &k in order {
        let a = unfold(&work, k)?;
        let r = ranks[k];
        if r > a.ncols() {
            return Err(Error::invalid(format!(
                "rank {r} for mode {k} exceeds the {} columns left after truncation",
                a.ncols()
            )));
        }
        let u = truncated_svd(a.as_ref(), r)?.u;
        work = ttm_t(&work, u.as_ref(), k)?;
        factors[k] = Some(u);
    }
    TuckerDecomposition::new(work, factors.into_iter().map(|u| u.expect("every mode visited")).collect())
}

/// Randomized HOSVD: randomized SVD of each full unfolding.
pub fn r_hosvd(x: &DenseTensor, ranks: &[usize], oversample: usize, seed: u64) -> Result<TuckerRun> {
    check_ranks(x, ranks)?;
    let mut timings = StageTimings::default();
    let mut ctx = JobCtx::new(0);
    let mut factors = Vec::with_capacity(ranks.len());
    let mut achieved = Vec::with_capacity(ranks.len());
    for (k, &r) in ranks.iter().enumerate() {
        let a = ctx.time(Stage::Gather, || unfold(x, k))?;
        let (svd, got) = ctx.time(Stage::Factor, || randomized_svd(&a, r, oversample, RngStream::new(seed, k as u64)))?;
        factors.push(svd.u);
        achieved.push(got);
    }
    let core = ctx.time(Stage::Ttm, || project_core(x, &factors))?;
    timings.extend(ctx.timings);
    Ok(TuckerRun {
        decomposition: TuckerDecomposition::new(core, factors)?,
        achieved_ranks: achieved,
        samples: None,
        timings,
    })
}

/// Number of fibers per mode under `cfg`, validated against `r_k + p ≤ s_k ≤ n_{≠k}`.
pub fn resolve_samples(x: &DenseTensor, ranks: &[usize], cfg: &SketchConfig) -> Result<Vec<usize>> {
    (0..x.order())
        .map(|k| {
            let cols = x.shape().complement_len(k);
            let s = cfg.samples.resolve(k, x.shape().dim(k), cols)?;
            let need = ranks[k] + cfg.oversample;
            if s < need || s > cols {
                return Err(Error::invalid(format!(
                    "mode {k}: {s} samples outside {need}..={cols} (rank + oversampling up to fiber count)"
                )));
            }
            Ok(s)
        })
        .collect()
}

/// One Sub-R factor: sample `s` mode-`k` fibers, sketch them to `r + p`
/// columns and keep the `r` leading left singular vectors.
///
/// Randomness comes from the mode's stream `(seed, k)`, so the result does not
/// depend on which worker runs it.
#[allow(clippy::too_many_arguments)]
pub fn sub_r_factor(
    x: &DenseTensor,
    k: usize,
    r: usize,
    s: usize,
    p: usize,
    seed: u64,
    partitions: usize,
    ctx: &mut JobCtx,
) -> Result<RangeBasis> {
    let stream = RngStream::new(seed, k as u64);
    let cols = x.shape().complement_len(k);
    let idx = ctx.time(Stage::Sampling, || {
        sample_indices_partitioned(cols, s, partitions.clamp(1, s), stream.substream(tags::SAMPLING))
    })?;
    let y = ctx.time(Stage::Sampling, || extract_fibers(x, k, &idx))?;
    let z = ctx.time(Stage::Sketch, || sketch(&y, r + p, stream.substream(tags::SKETCH)));
    ctx.time(Stage::Factor, || basis_from_sketch(&z, r, stream.substream(tags::PADDING)))
}

/// Subsampled randomized HOSVD.
pub fn sub_r_hosvd(x: &DenseTensor, ranks: &[usize], cfg: &SketchConfig, exec: &ExecPolicy) -> Result<TuckerRun> {
    check_ranks(x, ranks)?;
    exec.validate()?;
    if cfg.oversample < DEFAULT_OVERSAMPLE {
        log::warn!("oversampling {} is below the recommended {DEFAULT_OVERSAMPLE}", cfg.oversample);
    }
    let samples = resolve_samples(x, ranks, cfg)?;
    let partitions = exec.index_partitions.max(cfg.partitions);
    let (bases, mut timings) = parallel_factors(x.order(), exec, |k, ctx| {
        sub_r_factor(x, k, ranks[k], samples[k], cfg.oversample, cfg.seed, partitions, ctx)
    })?;
    let achieved = bases.iter().map(|b| b.achieved_rank).collect();
    let factors: Vec<Matrix> = bases.into_iter().map(|b| b.q).collect();
    let (core, t) = sliced_core(x, &factors, exec)?;
    timings.extend(t);
    Ok(TuckerRun {
        decomposition: TuckerDecomposition::new(core, factors)?,
        achieved_ranks: achieved,
        samples: Some(samples),
        timings,
    })
}

/// Fraction of mode-`k` fibers that `s` samples cover.
pub fn sampling_fraction(dims: &[usize], k: usize, s: usize) -> f64 {
    let cols: f64 = dims.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &n)| n as f64).product();
    s as f64 / cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;
    use crate::sketch::SampleRule;
    use crate::tensor::rel_error;
    use crate::testutil::{mat, median, planted_tucker, random_tensor};
    use proptest::prelude::*;

    fn projection_error(x: &DenseTensor, factors: &[Matrix]) -> f64 {
        let projectors: Vec<Matrix> = factors.iter().map(|u| u * u.transpose()).collect();
        let list: Vec<_> = projectors.iter().enumerate().map(|(k, p)| (k, p.as_ref())).collect();
        rel_error(x, &multi_ttm(x, &list).unwrap()).unwrap()
    }

    fn sub_r(x: &DenseTensor, ranks: &[usize], s: usize, seed: u64, workers: usize) -> TuckerRun {
        let cfg = SketchConfig::new(SampleRule::Count(s), seed);
        sub_r_hosvd(x, ranks, &cfg, &ExecPolicy::with_workers(workers)).unwrap()
    }

    #[test]
    fn deterministic_methods_recover_exact_rank() {
        let x = planted_tucker(&[10, 9, 8], &[3, 4, 2], 1);
        let ranks = [3, 4, 2];
        let t = t_hosvd(&x, &ranks).unwrap();
        assert!(rel_error(&x, &t.reconstruct().unwrap()).unwrap() <= 1e-10);
        for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let st = st_hosvd(&x, &ranks, Some(&order)).unwrap();
            assert!(rel_error(&x, &st.reconstruct().unwrap()).unwrap() <= 1e-10);
            assert!(st.factors().iter().all(|u| orthonormality_defect(u.as_ref()) <= 1e-10));
        }
    }

    #[test]
    fn full_rank_round_trip() {
        let x = random_tensor(&[4, 3, 5], 2);
        let full = [4, 3, 5];
        for dec in [t_hosvd(&x, &full).unwrap(), st_hosvd(&x, &full, None).unwrap()] {
            assert!(rel_error(&x, &dec.reconstruct().unwrap()).unwrap() <= 1e-12);
        }
        let r = r_hosvd(&x, &full, 0, 3).unwrap();
        assert!(rel_error(&x, &r.decomposition.reconstruct().unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_core_reconstructs_to_zero() {
        let core = DenseTensor::zeros(crate::Shape::new(vec![2, 2]).unwrap());
        let t = TuckerDecomposition::new(core, vec![mat(3, 2, |i, j| (i + j) as f64), mat(4, 2, |i, _| i as f64)]).unwrap();
        assert!(t.reconstruct().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_matches_summation_oracle() {
        let core = random_tensor(&[2, 2, 2], 4);
        let us = vec![
            mat(2, 2, |i, j| (1 + i + 2 * j) as f64 * 0.3),
            mat(3, 2, |i, j| ((i * j) as f64).sin() + 0.1),
            mat(2, 2, |i, j| if i == j { 1.0 } else { -0.5 }),
        ];
        let t = TuckerDecomposition::new(core.clone(), us.clone()).unwrap();
        let y = t.reconstruct().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..2 {
                    let mut v = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                v += core.get(&[a, b, c]) * us[0][(i, a)] * us[1][(j, b)] * us[2][(l, c)];
                            }
                        }
                    }
                    assert!((y.get(&[i, j, l]) - v).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn mismatched_decomposition_rejected() {
        let core = random_tensor(&[2, 2], 1);
        assert!(TuckerDecomposition::new(core.clone(), vec![mat(3, 2, |_, _| 1.0)]).is_err());
        assert!(TuckerDecomposition::new(core, vec![mat(3, 2, |_, _| 1.0), mat(3, 3, |_, _| 1.0)]).is_err());
    }

    #[test]
    fn t_hosvd_error_within_tail_sum() {
        use crate::linalg::singular_values;
        for seed in 0..5 {
            let x = random_tensor(&[6, 5, 4], seed);
            let ranks = [3, 2, 2];
            let err = rel_error(&x, &t_hosvd(&x, &ranks).unwrap().reconstruct().unwrap()).unwrap() * x.frobenius_norm();
            let tail: f64 = (0..3)
                .map(|k| singular_values(unfold(&x, k).unwrap().as_ref()).unwrap()[ranks[k]..].iter().map(|s| s * s).sum::<f64>())
                .sum();
            assert!(err * err <= tail * (1.0 + 1e-10));
        }
    }

    #[test]
    fn projection_identity_for_all_methods() {
        let x = random_tensor(&[7, 6, 5], 5);
        let ranks = [3, 3, 2];
        let mut decs = vec![t_hosvd(&x, &ranks).unwrap(), st_hosvd(&x, &ranks, None).unwrap()];
        decs.push(r_hosvd(&x, &ranks, 2, 1).unwrap().decomposition);
        decs.push(sub_r(&x, &ranks, 10, 1, 1).decomposition);
        for dec in decs {
            assert!(dec.factors().iter().all(|u| orthonormality_defect(u.as_ref()) <= 1e-10));
            let e1 = rel_error(&x, &dec.reconstruct().unwrap()).unwrap();
            let e2 = projection_error(&x, dec.factors());
            assert!((e1 - e2).abs() <= 1e-12, "{e1} vs {e2}");
        }
    }

    #[test]
    fn r_hosvd_recovers_exact_rank() {
        let x = planted_tucker(&[12, 11, 10], &[3, 3, 3], 6);
        let errs: Vec<f64> = (0..25)
            .map(|seed| rel_error(&x, &r_hosvd(&x, &[3, 3, 3], 4, seed).unwrap().decomposition.reconstruct().unwrap()).unwrap())
            .collect();
        assert!(median(errs) <= 1e-8);
    }

    #[test]
    fn sub_r_recovers_exact_rank() {
        let x = planted_tucker(&[15, 15, 15, 15], &[5, 5, 5, 5], 7);
        let errs: Vec<f64> = (0..5)
            .map(|seed| rel_error(&x, &sub_r(&x, &[5; 4], 75, seed, 1).decomposition.reconstruct().unwrap()).unwrap())
            .collect();
        assert!(median(errs.clone()) <= 1e-8, "{errs:?}");
    }

    #[test]
    fn sub_r_full_sampling_is_exact() {
        let x = planted_tucker(&[6, 5, 4], &[2, 2, 2], 8);
        let cfg = SketchConfig { samples: SampleRule::PerTarget(vec![20, 24, 30]), oversample: 2, seed: 1, partitions: 1 };
        let run = sub_r_hosvd(&x, &[2, 2, 2], &cfg, &ExecPolicy::default()).unwrap();
        assert!(rel_error(&x, &run.decomposition.reconstruct().unwrap()).unwrap() <= 1e-9);
        assert_eq!(run.samples, Some(vec![20, 24, 30]));
    }

    #[test]
    fn sub_r_rejects_bad_sample_counts() {
        let x = random_tensor(&[6, 5, 4], 1);
        let cfg = SketchConfig::new(SampleRule::Count(5), 1);
        assert!(matches!(sub_r_hosvd(&x, &[2, 2, 2], &cfg, &ExecPolicy::default()), Err(Error::InvalidArgument(_))));
        let cfg = SketchConfig::new(SampleRule::Count(25), 1);
        assert!(sub_r_hosvd(&x, &[2, 2, 2], &cfg, &ExecPolicy::default()).is_err());
        assert!(t_hosvd(&x, &[7, 1, 1]).is_err());
        assert!(t_hosvd(&x, &[1, 1]).is_err());
    }

    #[test]
    fn sub_r_is_worker_independent() {
        let x = planted_tucker(&[8, 8, 8], &[3, 3, 3], 9);
        let base = sub_r(&x, &[3, 3, 3], 12, 4, 1).decomposition;
        for w in [2, 4, 8] {
            assert_eq!(sub_r(&x, &[3, 3, 3], 12, 4, w).decomposition, base);
        }
    }

    #[test]
    fn sub_r_close_to_t_hosvd_on_incoherent_input() {
        let ranks = [4, 4, 4];
        let mut x = planted_tucker(&[14, 14, 14], &ranks, 10);
        let noise = random_tensor(&[14, 14, 14], 11);
        let scale = 1e-3 * x.frobenius_norm() / noise.frobenius_norm();
        x = DenseTensor::new(x.shape().clone(), x.data().iter().zip(noise.data()).map(|(a, b)| a + scale * b).collect()).unwrap();
        let best = rel_error(&x, &t_hosvd(&x, &ranks).unwrap().reconstruct().unwrap()).unwrap();
        let errs: Vec<f64> = (0..25)
            .map(|seed| rel_error(&x, &sub_r(&x, &ranks, 40, seed, 1).decomposition.reconstruct().unwrap()).unwrap())
            .collect();
        assert!(median(errs) <= 10.0 * best);
    }

    #[test]
    fn sampling_fraction_of_order_eight_grid() {
        let f = sampling_fraction(&[15; 8], 0, 75);
        assert!((f - 75.0 / 15f64.powi(7)).abs() < 1e-20);
        assert!((f - 4.4e-7).abs() < 0.05e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn factors_orthonormal_for_random_shapes(
            dims in proptest::collection::vec(4usize..7, 3),
            seed in 0u64..500,
        ) {
            let x = random_tensor(&dims, seed);
            let ranks: Vec<usize> = dims.iter().map(|&n| (n / 2).min(2)).collect();
            let dec = t_hosvd(&x, &ranks).unwrap();
            prop_assert!(dec.factors().iter().all(|u| orthonormality_defect(u.as_ref()) <= 1e-10));
            prop_assert_eq!(dec.ranks(), ranks.clone());
            let st = st_hosvd(&x, &ranks, None).unwrap();
            let e1 = rel_error(&x, &dec.reconstruct().unwrap()).unwrap();
            let e2 = rel_error(&x, &st.reconstruct().unwrap()).unwrap();
            // both are quasi-optimal; neither can be wildly worse than the other
            prop_assert!(e2 <= 3.0 * e1 + 1e-12 && e1 <= 3.0 * e2 + 1e-12);
        }
    }
}
