//! Repeated seeded runs, CSV rows and JSON summaries.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sketchtucker::htucker::DimensionTree;
use sketchtucker::parallel::{ExecPolicy, Stage, StageTimings};
use sketchtucker::registry::{Family, MethodConfig, Registry};
use sketchtucker::sketch::SampleRule;
use sketchtucker::tensor::{load_tensor, rel_error};
use sketchtucker::{DenseTensor, Error, Result};

use crate::generators::{gen_htucker, gen_tucker, CoreKind};

pub const CSV_HEADER: [&str; 11] =
    ["seed", "method", "d", "shape", "rank", "samples", "p", "workers", "rel_error", "total_s", "stage_json"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Generator {
    TuckerPlanted { core: CoreKind },
    HtuckerPlanted,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub generator: Generator,
    /// Ignored for file inputs.
    pub shape: Vec<usize>,
    pub ranks: Vec<usize>,
    pub method: String,
    pub samples: Option<SampleRule>,
    pub oversample: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub exec: ExecPolicy,
    /// Extra worker counts for a scaling table; empty means just `exec.workers`.
    pub scaling_workers: Vec<usize>,
    /// Leave timing columns blank so reruns give byte-identical CSV.
    pub omit_timings: bool,
}

impl ExperimentSpec {
    pub fn new(generator: Generator, shape: Vec<usize>, ranks: Vec<usize>, method: &str) -> Self {
        Self {
            generator,
            shape,
            ranks,
            method: method.to_string(),
            samples: None,
            oversample: sketchtucker::sketch::DEFAULT_OVERSAMPLE,
            runs: 1,
            base_seed: 0,
            exec: ExecPolicy::default(),
            scaling_workers: Vec::new(),
            omit_timings: false,
        }
    }

    /// Checks that the parameters fit the method.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let m = registry.get(&self.method)?;
        match (m.sampled(), &self.samples) {
            (true, None) => {
                return Err(Error::InvalidArgument(format!("method {} needs --samples or --alpha", self.method)))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(format!("method {} does not sample fibers", self.method)))
            }
            _ => {}
        }
        match (&self.generator, m.family()) {
            (Generator::TuckerPlanted { .. }, Family::HTucker) | (Generator::HtuckerPlanted, Family::Tucker) => {
                log::warn!("generator family differs from method family; recovery will not be exact");
            }
            _ => {}
        }
        if self.runs == 0 {
            return Err(Error::InvalidArgument("at least one run is required".into()));
        }
        if self.ranks.is_empty() {
            return Err(Error::InvalidArgument("no rank given".into()));
        }
        self.exec.validate()?;
        if self.scaling_workers.contains(&0) {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn worker_counts(&self) -> Vec<usize> {
        if self.scaling_workers.is_empty() {
            vec![self.exec.workers]
        } else {
            self.scaling_workers.clone()
        }
    }

    /// Input tensor for one seed.
    pub fn tensor(&self, seed: u64) -> Result<DenseTensor> {
        match &self.generator {
            Generator::TuckerPlanted { core } => {
                let ranks = broadcast(&self.ranks, self.shape.len())?;
                Ok(gen_tucker(&self.shape, &ranks, *core, seed)?.0)
            }
            Generator::HtuckerPlanted => {
                let tree = DimensionTree::balanced(self.shape.len())?;
                Ok(gen_htucker(&self.shape, &tree, self.ranks[0], seed)?.0)
            }
            Generator::File { path } => load_tensor(path),
        }
    }
}

fn broadcast(ranks: &[usize], d: usize) -> Result<Vec<usize>> {
    match ranks.len() {
        1 => Ok(vec![ranks[0]; d]),
        n if n == d => Ok(ranks.to_vec()),
        n => Err(Error::InvalidArgument(format!("{n} ranks for {d} modes"))),
    }
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub method: String,
    pub d: usize,
    pub shape: String,
    pub rank: String,
    pub samples: String,
    pub p: usize,
    pub workers: usize,
    pub rel_error: f64,
    pub total_s: Option<f64>,
    pub stage_json: String,
}

/// Everything kept from one run besides the CSV columns.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub row: RunRow,
    pub achieved_ranks: Vec<usize>,
    pub requested_ranks: Vec<usize>,
    pub timings: StageTimings,
    pub total_s: f64,
}

impl RunRecord {
    pub fn rank_deficient(&self) -> bool {
        self.achieved_ranks.iter().zip(&self.requested_ranks).any(|(a, r)| a < r)
    }
}

/// Minimum, quartiles and maximum (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] })
    }
}

/// Share of the fibers one mode or node samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingFraction {
    pub target: usize,
    pub samples: usize,
    pub fibers: f64,
    pub fraction: f64,
    pub percent: String,
}

/// `s / ∏_{j≠k} n_j` as a percentage, rounded up to one significant figure.
pub fn format_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if !(pct.is_finite() && pct > 0.0) {
        return "0%".into();
    }
    let mut e = pct.log10().floor() as i32;
    let scale = 10f64.powi(e);
    // Tolerate representation error when pct is already a single digit.
    let mut m = (pct / scale * (1.0 - 1e-12)).ceil();
    if m >= 10.0 {
        m = 1.0;
        e += 1;
    }
    let decimals = (-e).max(0) as usize;
    format!("{:.*}%", decimals, m * 10f64.powi(e))
}

/// Fraction of mode-`k` fibers touched by `s` samples on an `n^d` tensor.
pub fn cubic_sampling_fraction(d: usize, n: usize, s: usize) -> SamplingFraction {
    let fibers = (n as f64).powi(d as i32 - 1);
    let fraction = s as f64 / fibers;
    SamplingFraction { target: 0, samples: s, fibers, fraction, percent: format_percent(fraction) }
}

fn sampling_fractions(family: Family, dims: &[usize], samples: &[usize]) -> Vec<SamplingFraction> {
    let total: f64 = dims.iter().map(|&n| n as f64).product();
    let tree = match family {
        Family::HTucker => DimensionTree::balanced(dims.len()).ok(),
        Family::Tucker => None,
    };
    samples
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > 0)
        .map(|(t, &s)| {
            let inside: f64 = match &tree {
                Some(tree) => tree.node(t).modes.iter().map(|m| dims[m] as f64).product(),
                None => dims[t] as f64,
            };
            let fibers = total / inside;
            let fraction = s as f64 / fibers;
            SamplingFraction { target: t, samples: s, fibers, fraction, percent: format_percent(fraction) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub arch: String,
    pub available_cores: usize,
    pub crate_version: String,
    pub debug_assertions: bool,
}

impl EnvironmentFingerprint {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: usize,
    pub median_total_s: f64,
    /// Busiest worker's sampling, sketch and factor time.
    pub median_factor_s: f64,
    pub factor_speedup: f64,
    pub total_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub generator: Generator,
    pub shape: Vec<usize>,
    pub ranks: Vec<usize>,
    pub samples: Option<SampleRule>,
    pub oversample: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub rel_error: Option<FiveNumber>,
    pub total_s: Option<FiveNumber>,
    pub achieved_ranks: Vec<Vec<usize>>,
    pub rank_deficient_runs: usize,
    pub sampling_fractions: Vec<SamplingFraction>,
    pub scaling: Vec<ScalingRow>,
    pub environment: EnvironmentFingerprint,
    /// Set when the smooth-grid core is in use, which only stands in for a
    /// published test function.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl RunReport {
    pub fn rows(&self) -> impl Iterator<Item = &RunRow> {
        self.records.iter().map(|r| &r.row)
    }

    pub fn any_rank_deficient(&self) -> bool {
        self.records.iter().any(RunRecord::rank_deficient)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_csv(self.rows(), w)
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn write_csv<'a>(rows: impl IntoIterator<Item = &'a RunRow>, w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        out.serialize(row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`], rejecting any other header.
pub fn read_csv(r: impl Read) -> Result<Vec<RunRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    rdr.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn factor_span(t: &StageTimings) -> f64 {
    let mut per: Vec<(usize, f64)> = Vec::new();
    for r in &t.records {
        if matches!(r.stage, Stage::Sampling | Stage::Sketch | Stage::Factor) {
            match per.iter_mut().find(|(w, _)| *w == r.worker) {
                Some((_, s)) => *s += r.seconds,
                None => per.push((r.worker, r.seconds)),
            }
        }
    }
    per.into_iter().map(|(_, s)| s).fold(0.0, f64::max)
}

fn median(v: &[f64]) -> f64 {
    FiveNumber::of(v).map_or(f64::NAN, |f| f.median)
}

/// Runs `spec.runs` seeded runs (seed = base + i) for every worker count.
/// The same seed drives the generator and the method.
pub fn run_experiment(spec: &ExperimentSpec, registry: &Registry) -> Result<RunReport> {
    spec.validate(registry)?;
    let method = registry.get(&spec.method)?;
    let workers = spec.worker_counts();
    let mut records = Vec::with_capacity(spec.runs * workers.len());
    let mut fractions = Vec::new();
    let mut shape = spec.shape.clone();
    let mut ranks_seen = Vec::new();
    for i in 0..spec.runs {
        let seed = spec.base_seed.wrapping_add(i as u64);
        let x = spec.tensor(seed)?;
        shape = x.dims().to_vec();
        for &w in &workers {
            let mut cfg = MethodConfig::new(spec.ranks.clone());
            cfg.samples = spec.samples.clone();
            cfg.oversample = spec.oversample;
            cfg.seed = seed;
            cfg.exec = ExecPolicy { workers: w, ..spec.exec.clone() };
            let start = Instant::now();
            let out = method.decompose(&x, &cfg)?;
            let total_s = start.elapsed().as_secs_f64();
            let err = rel_error(&x, &out.decomposition.reconstruct()?)?;
            let requested = out.decomposition.ranks();
            if out.achieved_ranks.iter().zip(&requested).any(|(a, r)| a < r) {
                log::warn!("seed {seed}: achieved ranks {:?} below requested {requested:?}", out.achieved_ranks);
            }
            if fractions.is_empty() {
                if let Some(s) = &out.samples {
                    fractions = sampling_fractions(method.family(), x.dims(), s);
                }
            }
            ranks_seen = requested.clone();
            let row = RunRow {
                seed,
                method: spec.method.clone(),
                d: x.order(),
                shape: join(x.dims(), "x"),
                rank: join(&spec.ranks, "x"),
                samples: out.samples.as_deref().map(|s| join(s, ";")).unwrap_or_default(),
                p: spec.oversample,
                workers: w,
                rel_error: err,
                total_s: (!spec.omit_timings).then_some(total_s),
                stage_json: if spec.omit_timings { "[]".into() } else { out.timings.to_json() },
            };
            records.push(RunRecord {
                row,
                achieved_ranks: out.achieved_ranks,
                requested_ranks: requested,
                timings: out.timings,
                total_s,
            });
        }
    }

    let errors: Vec<f64> = records.iter().map(|r| r.row.rel_error).collect();
    let times: Vec<f64> = records.iter().map(|r| r.total_s).collect();
    let scaling = if workers.len() > 1 {
        let per = |w: usize| -> (f64, f64) {
            let sel: Vec<&RunRecord> = records.iter().filter(|r| r.row.workers == w).collect();
            (
                median(&sel.iter().map(|r| r.total_s).collect::<Vec<_>>()),
                median(&sel.iter().map(|r| factor_span(&r.timings)).collect::<Vec<_>>()),
            )
        };
        let (base_total, base_factor) = per(workers[0]);
        workers
            .iter()
            .map(|&w| {
                let (t, f) = per(w);
                ScalingRow {
                    workers: w,
                    median_total_s: t,
                    median_factor_s: f,
                    factor_speedup: base_factor / f,
                    total_speedup: base_total / t,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary = Summary {
        method: spec.method.clone(),
        generator: spec.generator.clone(),
        shape,
        ranks: ranks_seen,
        samples: spec.samples.clone(),
        oversample: spec.oversample,
        runs: spec.runs,
        base_seed: spec.base_seed,
        rel_error: FiveNumber::of(&errors),
        total_s: if spec.omit_timings { None } else { FiveNumber::of(&times) },
        achieved_ranks: records.iter().map(|r| r.achieved_ranks.clone()).collect(),
        rank_deficient_runs: records.iter().filter(|r| r.rank_deficient()).count(),
        sampling_fractions: fractions,
        scaling,
        environment: EnvironmentFingerprint::capture(),
        label: matches!(spec.generator, Generator::TuckerPlanted { core: CoreKind::Smooth })
            .then(|| "test-2 stand-in".to_string()),
    };
    Ok(RunReport { records, summary })
}
