//! Argument parsing, dispatch and exit codes.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sketchtucker::htucker::{save_htucker, DimensionTree};
use sketchtucker::parallel::ExecPolicy;
use sketchtucker::registry::{Decomposition, Family, MethodConfig, Registry};
use sketchtucker::sketch::{SampleRule, DEFAULT_OVERSAMPLE};
use sketchtucker::tensor::{load_tensor, rel_error, save_tensor};
use sketchtucker::DenseTensor;

use crate::checks::{all_pass, check_suite, Preset};
use crate::experiment::{cubic_sampling_fraction, run_experiment, write_csv, EnvironmentFingerprint, ExperimentSpec, Generator, RunRow};
use crate::generators::{gen_htucker, gen_tucker, CoreKind};

pub mod exit {
    pub const OK: i32 = 0;
    pub const ARGUMENT: i32 = 2;
    pub const IO: i32 = 3;
    pub const RESOURCE: i32 = 4;
    pub const CHECK: i32 = 5;
    pub const NUMERICAL: i32 = 6;
}

/// Failures raised by the front end itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Argument(String),
    #[error("{failed} of {total} checks failed")]
    CheckFailed { failed: usize, total: usize },
    #[error("achieved ranks fell short of the target: {0}")]
    RankDeficient(String),
}

#[derive(Debug, Parser)]
#[command(name = "sketchtucker", version, about = "Sampled randomized Tucker and hierarchical Tucker decompositions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted low-rank tensor to an SRTT file.
    Gen(GenArgs),
    /// Run one Tucker decomposition.
    Tucker(DecomposeArgs),
    /// Run one hierarchical Tucker decomposition.
    Htucker(DecomposeArgs),
    /// Repeat seeded runs and emit CSV rows and a JSON summary.
    Bench(BenchArgs),
    /// Run the diagnostics presets.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Tucker,
    Htucker,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "tucker")]
    pub kind: Kind,
    /// Dimensions, e.g. `15,15,15` or `15^4`.
    #[arg(long, value_parser = parse_dims)]
    pub shape: Dims,
    #[arg(long, value_parser = parse_dims)]
    pub rank: Dims,
    #[arg(long, value_enum, default_value = "uniform")]
    pub core: CoreKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub method: Option<String>,
    /// SRTT input; without it a planted tensor is generated from `--shape`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    pub shape: Option<Dims>,
    /// One rank for all modes or nodes, or a comma list.
    #[arg(long, value_parser = parse_dims)]
    pub rank: Option<Dims>,
    #[arg(long, value_enum, default_value = "uniform")]
    pub core: CoreKind,
    /// Fibers per mode or node: one count or a comma list.
    #[arg(long, value_parser = parse_dims, conflicts_with = "alpha")]
    pub samples: Option<Dims>,
    /// Samples proportional to the row count: `s = α·n`.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OVERSAMPLE)]
    pub oversample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub slice_mode: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub partitions: usize,
    /// Hold the root transfer until every basis is done.
    #[arg(long)]
    pub emulate_serial_root: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the hierarchical decomposition to an SRHT file.
    #[arg(long)]
    pub save: Option<PathBuf>,
    /// Treat a numerical-rank shortfall as an error.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorArg {
    Tucker,
    Htucker,
    File,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: DecomposeArgs,
    /// Defaults to the method's family, or `file` when `--input` is set.
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorArg>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Comma list of worker counts for a scaling table.
    #[arg(long = "scaling", value_parser = parse_dims)]
    pub scaling: Option<Dims>,
    /// Blank timing columns so reruns produce identical files.
    #[arg(long)]
    pub omit_timings: bool,
    /// Print sampling fractions `d:n:s` for cubic shapes and exit.
    #[arg(long = "fraction", value_parser = parse_fraction)]
    pub fractions: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Comma list of presets; an empty string runs none. Defaults to every
    /// preset except `lemma31-coherent`.
    #[arg(long)]
    pub presets: Option<String>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Integer list given as `15,15,15`, `15x15x15` or `15^3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    if let Some((n, d)) = s.split_once('^') {
        let n: usize = n.trim().parse().map_err(|e| format!("'{s}': {e}"))?;
        let d: usize = d.trim().parse().map_err(|e| format!("'{s}': {e}"))?;
        return Ok(Dims(vec![n; d]));
    }
    s.split([',', 'x'])
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("'{t}' in '{s}': {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Dims)
}

fn parse_fraction(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let v: Vec<usize> =
        s.split(':').map(|t| t.parse::<usize>().map_err(|e| format!("'{s}': {e}"))).collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [d, n, s] if d >= 2 && n >= 1 => Ok((d, n, s)),
        _ => Err(format!("expected d:n:s, got '{s}'")),
    }
}

/// Exit code and reason tag for an error chain.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    use sketchtucker::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Argument(_) => (exit::ARGUMENT, "argument"),
                CliError::CheckFailed { .. } => (exit::CHECK, "check-failed"),
                CliError::RankDeficient(_) => (exit::NUMERICAL, "numerical-rank"),
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e.root_cause() {
                E::InvalidArgument(_) | E::OutOfBounds(_) => (exit::ARGUMENT, "argument"),
                E::Io(_) | E::Format(_) => (exit::IO, "io"),
                E::ResourceCap { .. } => (exit::RESOURCE, "resource-cap"),
                E::Numerical(_) => (exit::NUMERICAL, "numerical"),
                E::Job { .. } => unreachable!("root_cause strips job wrappers"),
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return (exit::IO, "io");
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return (exit::ARGUMENT, "argument");
        }
    }
    (exit::IO, "internal")
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr as one JSON object.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return exit::OK;
        }
        Err(e) => return report(&anyhow::Error::new(e)),
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => report(&e),
    }
}

fn report(err: &anyhow::Error) -> i32 {
    let (code, reason) = classify(err);
    let message = format!("{err:#}");
    eprintln!("{}", json!({"error": reason, "exit_code": code, "message": message.trim()}));
    code
}

pub fn run(cli: Cli) -> Result<()> {
    let registry = Registry::builtin();
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Tucker(a) => decompose(&registry, Family::Tucker, a),
        Command::Htucker(a) => decompose(&registry, Family::HTucker, a),
        Command::Bench(a) => bench(&registry, a),
        Command::Check(a) => check(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let (shape, rank) = (&a.shape.0, &a.rank.0);
    if shape.is_empty() || rank.is_empty() {
        return Err(CliError::Argument("--shape and --rank must not be empty".into()).into());
    }
    let x = match a.kind {
        Kind::Tucker => {
            let ranks = if rank.len() == 1 { vec![rank[0]; shape.len()] } else { rank.clone() };
            gen_tucker(shape, &ranks, a.core, a.seed)?.0
        }
        Kind::Htucker => {
            let tree = DimensionTree::balanced(shape.len())?;
            gen_htucker(shape, &tree, rank[0], a.seed)?.0
        }
    };
    save_tensor(&x, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", json!({"out": a.out, "shape": x.dims(), "entries": x.len(), "frobenius": x.frobenius_norm()}));
    Ok(())
}

fn sample_rule(a: &DecomposeArgs) -> Result<Option<SampleRule>> {
    Ok(match (&a.samples, a.alpha) {
        (Some(Dims(v)), _) if v.len() == 1 => Some(SampleRule::Count(v[0])),
        (Some(Dims(v)), _) => Some(SampleRule::PerTarget(v.clone())),
        (None, Some(alpha)) => Some(SampleRule::Alpha(alpha)),
        (None, None) => None,
    })
}

fn exec_policy(a: &DecomposeArgs) -> ExecPolicy {
    ExecPolicy {
        workers: a.workers,
        slice_mode: a.slice_mode,
        index_partitions: a.partitions,
        emulate_serial_root: a.emulate_serial_root,
    }
}

fn default_method(family: Family) -> &'static str {
    match family {
        Family::Tucker => "sub-r-hosvd",
        Family::HTucker => "sub-r-rtl-ht",
    }
}

fn require_rank(a: &DecomposeArgs) -> Result<Vec<usize>> {
    match &a.rank {
        Some(Dims(r)) if !r.is_empty() => Ok(r.clone()),
        _ => Err(CliError::Argument("--rank is required".into()).into()),
    }
}

fn load_or_generate(a: &DecomposeArgs, ranks: &[usize], family: Family) -> Result<DenseTensor> {
    match (&a.input, &a.shape) {
        (Some(path), _) => Ok(load_tensor(path).with_context(|| format!("reading {}", path.display()))?),
        (None, Some(Dims(shape))) => {
            let generator = match family {
                Family::Tucker => Generator::TuckerPlanted { core: a.core },
                Family::HTucker => Generator::HtuckerPlanted,
            };
            Ok(ExperimentSpec::new(generator, shape.clone(), ranks.to_vec(), "").tensor(a.seed)?)
        }
        (None, None) => Err(CliError::Argument("give --input or --shape".into()).into()),
    }
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn decompose(registry: &Registry, family: Family, a: DecomposeArgs) -> Result<()> {
    let ranks = require_rank(&a)?;
    let name = a.method.clone().unwrap_or_else(|| default_method(family).to_string());
    let method = registry.get(&name)?;
    if method.family() != family {
        return Err(CliError::Argument(format!("method {name} does not produce a {family:?} decomposition")).into());
    }
    let samples = sample_rule(&a)?;
    match (method.sampled(), &samples) {
        (true, None) => return Err(CliError::Argument(format!("method {name} needs --samples or --alpha")).into()),
        (false, Some(_)) => return Err(CliError::Argument(format!("method {name} does not sample fibers")).into()),
        _ => {}
    }
    let x = load_or_generate(&a, &ranks, family)?;
    let mut cfg = MethodConfig::new(ranks.clone());
    cfg.samples = samples;
    cfg.oversample = a.oversample;
    cfg.seed = a.seed;
    cfg.exec = exec_policy(&a);
    let start = Instant::now();
    let out = method.decompose(&x, &cfg)?;
    let total_s = start.elapsed().as_secs_f64();
    let err = rel_error(&x, &out.decomposition.reconstruct()?)?;
    let requested = out.decomposition.ranks();

    if let Some(path) = &a.save {
        match &out.decomposition {
            Decomposition::HTucker(h) => save_htucker(h, path).with_context(|| format!("writing {}", path.display()))?,
            Decomposition::Tucker(_) => {
                return Err(CliError::Argument("--save is only available for hierarchical Tucker".into()).into())
            }
        }
    }
    let row = RunRow {
        seed: a.seed,
        method: name.clone(),
        d: x.order(),
        shape: join(x.dims(), "x"),
        rank: join(&ranks, "x"),
        samples: out.samples.as_deref().map(|s| join(s, ";")).unwrap_or_default(),
        p: a.oversample,
        workers: a.workers,
        rel_error: err,
        total_s: Some(total_s),
        stage_json: out.timings.to_json(),
    };
    let mut w = output(a.out.as_deref())?;
    match a.format.unwrap_or(Format::Json) {
        Format::Csv => write_csv([&row], &mut w)?,
        Format::Json | Format::Both => {
            let storage = out.decomposition.storage_count();
            let report = json!({
                "run": row,
                "ranks": requested,
                "achieved_ranks": out.achieved_ranks,
                "storage": storage,
                "compression_ratio": x.len() as f64 / storage as f64,
                "timings": out.timings,
                "environment": EnvironmentFingerprint::capture(),
            });
            writeln!(w, "{}", serde_json::to_string_pretty(&report)?)?;
        }
    }
    w.flush()?;
    rank_outcome(&out.achieved_ranks, &requested, a.strict)
}

fn rank_outcome(achieved: &[usize], requested: &[usize], strict: bool) -> Result<()> {
    if achieved.iter().zip(requested).any(|(a, r)| a < r) {
        let msg = format!("achieved {achieved:?}, requested {requested:?}");
        if strict {
            return Err(CliError::RankDeficient(msg).into());
        }
        log::warn!("numerical rank below target: {msg}");
    }
    Ok(())
}

fn bench(registry: &Registry, a: BenchArgs) -> Result<()> {
    if !a.fractions.is_empty() {
        for &(d, n, s) in &a.fractions {
            let f = cubic_sampling_fraction(d, n, s);
            println!("d={d} n={n} s={s} fraction={s}/{n}^{} = {:.3e} ({})", d - 1, f.fraction, f.percent);
        }
        return Ok(());
    }
    let c = &a.common;
    let ranks = require_rank(c)?;
    let method = c.method.clone().ok_or_else(|| CliError::Argument("--method is required".into()))?;
    let family = registry.get(&method)?.family();
    let generator = match (a.generator, &c.input) {
        (Some(GeneratorArg::File) | None, Some(path)) => Generator::File { path: path.clone() },
        (Some(GeneratorArg::File), None) => return Err(CliError::Argument("--generator file needs --input".into()).into()),
        (Some(GeneratorArg::Tucker), _) => Generator::TuckerPlanted { core: c.core },
        (Some(GeneratorArg::Htucker), _) => Generator::HtuckerPlanted,
        (None, None) => match family {
            Family::Tucker => Generator::TuckerPlanted { core: c.core },
            Family::HTucker => Generator::HtuckerPlanted,
        },
    };
    let shape = match (&generator, &c.shape) {
        (Generator::File { .. }, _) => Vec::new(),
        (_, Some(Dims(s))) => s.clone(),
        (_, None) => return Err(CliError::Argument("--shape is required for generated inputs".into()).into()),
    };
    let mut spec = ExperimentSpec::new(generator, shape, ranks, &method);
    spec.samples = sample_rule(c)?;
    spec.oversample = c.oversample;
    spec.runs = a.runs;
    spec.base_seed = c.seed;
    spec.exec = exec_policy(c);
    spec.scaling_workers = a.scaling.clone().map(|d| d.0).unwrap_or_default();
    spec.omit_timings = a.omit_timings;
    let report = run_experiment(&spec, registry)?;
    for f in &report.summary.sampling_fractions {
        log::info!("target {}: {} of {} fibers ({})", f.target, f.samples, f.fibers, f.percent);
    }

    let format = c.format.unwrap_or(if c.out.is_some() { Format::Both } else { Format::Json });
    match (format, &c.out) {
        (Format::Both, Some(out)) => {
            report.write_csv(output(Some(&out.with_extension("csv")))?)?;
            let mut w = output(Some(&out.with_extension("json")))?;
            writeln!(w, "{}", report.summary_json())?;
            w.flush()?;
        }
        (Format::Both, None) => {
            return Err(CliError::Argument("--format both needs --out".into()).into());
        }
        (Format::Csv, out) => {
            let mut w = output(out.as_deref())?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        (Format::Json, out) => {
            let mut w = output(out.as_deref())?;
            writeln!(w, "{}", report.summary_json())?;
            w.flush()?;
        }
    }
    if report.any_rank_deficient() {
        let n = report.summary.rank_deficient_runs;
        if c.strict {
            return Err(CliError::RankDeficient(format!("{n} of {} runs", report.records.len())).into());
        }
        log::warn!("{n} runs reached a lower numerical rank than requested");
    }
    Ok(())
}

fn check(a: CheckArgs) -> Result<()> {
    let presets = match a.presets.as_deref() {
        None => Preset::defaults(),
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Preset::parse)
            .collect::<sketchtucker::Result<Vec<_>>>()?,
    };
    let reports = check_suite(&presets, a.seed)?;
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", serde_json::to_string_pretty(&reports)?)?;
    w.flush()?;
    for r in reports.iter().filter(|r| !r.pass) {
        log::error!("{} failed: {}", r.check, r.note.as_deref().unwrap_or("estimate above bound"));
    }
    if !all_pass(&reports) {
        let failed = reports.iter().filter(|r| !r.pass).count();
        return Err(CliError::CheckFailed { failed, total: reports.len() }.into());
    }
    Ok(())
}
