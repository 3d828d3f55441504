//! Decomposition methods behind one trait, looked up by name at runtime.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htucker::{ht_storage_count, rtl_ht, sub_r_rtl_ht, DimensionTree, HTuckerDecomposition, HtRun};
use crate::parallel::{ExecPolicy, StageTimings};
use crate::sketch::{SampleRule, SketchConfig, DEFAULT_OVERSAMPLE};
use crate::tensor::DenseTensor;
use crate::tucker::{r_hosvd, st_hosvd, sub_r_hosvd, t_hosvd, TuckerDecomposition, TuckerRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Tucker,
    HTucker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decomposition {
    Tucker(TuckerDecomposition),
    HTucker(HTuckerDecomposition),
}

impl Decomposition {
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        match self {
            Decomposition::Tucker(t) => t.reconstruct(),
            Decomposition::HTucker(h) => h.reconstruct(),
        }
    }

    pub fn storage_count(&self) -> usize {
        match self {
            Decomposition::Tucker(t) => t.storage_count(),
            Decomposition::HTucker(h) => ht_storage_count(h),
        }
    }

    /// Mode ranks (Tucker) or per-node ranks (H-Tucker).
    pub fn ranks(&self) -> Vec<usize> {
        match self {
            Decomposition::Tucker(t) => t.ranks(),
            Decomposition::HTucker(h) => h.ranks(),
        }
    }
}

/// Everything a method may need. Fields a method does not use are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    /// One rank for every mode or node, or one per mode (Tucker) or per node
    /// (H-Tucker, node order, root entry ignored).
    pub ranks: Vec<usize>,
    pub samples: Option<SampleRule>,
    pub oversample: usize,
    pub seed: u64,
    pub exec: ExecPolicy,
    pub mode_order: Option<Vec<usize>>,
    /// Defaults to the balanced tree.
    pub tree: Option<DimensionTree>,
}

impl MethodConfig {
    pub fn new(ranks: Vec<usize>) -> Self {
        Self {
            ranks,
            samples: None,
            oversample: DEFAULT_OVERSAMPLE,
            seed: 0,
            exec: ExecPolicy::default(),
            mode_order: None,
            tree: None,
        }
    }

    fn mode_ranks(&self, d: usize) -> Result<Vec<usize>> {
        match self.ranks.len() {
            1 => Ok(vec![self.ranks[0]; d]),
            n if n == d => Ok(self.ranks.clone()),
            n => Err(Error::invalid(format!("{n} ranks given for an order-{d} tensor"))),
        }
    }

    fn tree_for(&self, d: usize) -> Result<DimensionTree> {
        match &self.tree {
            Some(t) if t.order() == d => Ok(t.clone()),
            Some(t) => Err(Error::invalid(format!("tree has {} modes, tensor has {d}", t.order()))),
            None => DimensionTree::balanced(d),
        }
    }

    fn node_ranks(&self, tree: &DimensionTree) -> Result<Vec<usize>> {
        match self.ranks.len() {
            1 => Ok(crate::htucker::uniform_ranks(tree, self.ranks[0])),
            n if n == tree.len() => {
                let mut r = self.ranks.clone();
                r[0] = 1;
                Ok(r)
            }
            n => Err(Error::invalid(format!("{n} ranks given for a tree of {} nodes", tree.len()))),
        }
    }

    fn sample_rule(&self) -> Result<&SampleRule> {
        self.samples.as_ref().ok_or_else(|| Error::invalid("this method needs a sample count or coefficient"))
    }
}

/// Output of [`Decomposer::decompose`].
#[derive(Debug, Clone)]
pub struct Decomposed {
    pub decomposition: Decomposition,
    pub achieved_ranks: Vec<usize>,
    pub samples: Option<Vec<usize>>,
    pub timings: StageTimings,
}

impl From<TuckerRun> for Decomposed {
    fn from(r: TuckerRun) -> Self {
        Self {
            decomposition: Decomposition::Tucker(r.decomposition),
            achieved_ranks: r.achieved_ranks,
            samples: r.samples,
            timings: r.timings,
        }
    }
}

impl From<HtRun> for Decomposed {
    fn from(r: HtRun) -> Self {
        Self {
            decomposition: Decomposition::HTucker(r.decomposition),
            achieved_ranks: r.achieved_ranks,
            samples: r.samples,
            timings: r.timings,
        }
    }
}

pub trait Decomposer: Send + Sync {
    fn name(&self) -> &'static str;
    fn family(&self) -> Family;
    /// Whether the method samples fibers and so needs `samples`.
    fn sampled(&self) -> bool;
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed>;
}

fn timed_tucker(x: &DenseTensor, f: impl FnOnce() -> Result<TuckerDecomposition>) -> Result<Decomposed> {
    let start = std::time::Instant::now();
    let t = f()?;
    let mut timings = StageTimings::default();
    timings.push(crate::parallel::Stage::Factor, 0, start.elapsed().as_secs_f64());
    let ranks = t.ranks();
    let _ = x;
    Ok(Decomposed { decomposition: Decomposition::Tucker(t), achieved_ranks: ranks, samples: None, timings })
}

struct THosvd;
struct StHosvd;
struct RHosvd;
struct SubRHosvd;
struct RtlHt;
struct SubRRtlHt;

impl Decomposer for THosvd {
    fn name(&self) -> &'static str {
        "t-hosvd"
    }
    fn family(&self) -> Family {
        Family::Tucker
    }
    fn sampled(&self) -> bool {
        false
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        let ranks = cfg.mode_ranks(x.order())?;
        timed_tucker(x, || t_hosvd(x, &ranks))
    }
}

impl Decomposer for StHosvd {
    fn name(&self) -> &'static str {
        "st-hosvd"
    }
    fn family(&self) -> Family {
        Family::Tucker
    }
    fn sampled(&self) -> bool {
        false
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        let ranks = cfg.mode_ranks(x.order())?;
        timed_tucker(x, || st_hosvd(x, &ranks, cfg.mode_order.as_deref()))
    }
}

impl Decomposer for RHosvd {
    fn name(&self) -> &'static str {
        "r-hosvd"
    }
    fn family(&self) -> Family {
        Family::Tucker
    }
    fn sampled(&self) -> bool {
        false
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        Ok(r_hosvd(x, &cfg.mode_ranks(x.order())?, cfg.oversample, cfg.seed)?.into())
    }
}

impl Decomposer for SubRHosvd {
    fn name(&self) -> &'static str {
        "sub-r-hosvd"
    }
    fn family(&self) -> Family {
        Family::Tucker
    }
    fn sampled(&self) -> bool {
        true
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        let sketch = SketchConfig {
            samples: cfg.sample_rule()?.clone(),
            oversample: cfg.oversample,
            seed: cfg.seed,
            partitions: cfg.exec.index_partitions,
        };
        Ok(sub_r_hosvd(x, &cfg.mode_ranks(x.order())?, &sketch, &cfg.exec)?.into())
    }
}

impl Decomposer for RtlHt {
    fn name(&self) -> &'static str {
        "rtl-ht"
    }
    fn family(&self) -> Family {
        Family::HTucker
    }
    fn sampled(&self) -> bool {
        false
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        let tree = cfg.tree_for(x.order())?;
        Ok(rtl_ht(x, &tree, &cfg.node_ranks(&tree)?)?.into())
    }
}

impl Decomposer for SubRRtlHt {
    fn name(&self) -> &'static str {
        "sub-r-rtl-ht"
    }
    fn family(&self) -> Family {
        Family::HTucker
    }
    fn sampled(&self) -> bool {
        true
    }
    fn decompose(&self, x: &DenseTensor, cfg: &MethodConfig) -> Result<Decomposed> {
        let tree = cfg.tree_for(x.order())?;
        let ranks = cfg.node_ranks(&tree)?;
        Ok(sub_r_rtl_ht(x, &tree, &ranks, cfg.sample_rule()?, cfg.oversample, cfg.seed, &cfg.exec)?.into())
    }
}

/// Name → method table.
pub struct Registry {
    methods: BTreeMap<&'static str, Box<dyn Decomposer>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    /// The six built-in methods.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(THosvd));
        r.register(Box::new(StHosvd));
        r.register(Box::new(RHosvd));
        r.register(Box::new(SubRHosvd));
        r.register(Box::new(RtlHt));
        r.register(Box::new(SubRRtlHt));
        r
    }

    /// Adds or replaces a method under its own name.
    pub fn register(&mut self, method: Box<dyn Decomposer>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Decomposer> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::invalid(format!("unknown method '{name}'; available: {}", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}
