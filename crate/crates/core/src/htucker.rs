//! Hierarchical Tucker: dimension trees, transfer tensors, RtL-HT and
//! Sub-R-RtL-HT.
//!
//! Kronecker convention. For an internal node `S` with children `ℓ` (lower
//! modes) and `r` (higher modes), row `i_ℓ + n_ℓ·i_r` of `U_S` pairs row `i_ℓ`
//! of `U_ℓ` with row `i_r` of `U_r`. This is what the linear index over `S`'s
//! modes gives when every mode of `ℓ` precedes every mode of `r`. Column `i`
//! of `U_S`, viewed as an `n_ℓ × n_r` column-major matrix, equals
//! `U_ℓ · B(i,:,:) · U_rᵀ`. In standard Kronecker notation that is
//! `U_S = (U_r ⊗ U_ℓ) · B^(1)ᵀ`.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mul, mul_tn, truncated_svd, view, Matrix};
use crate::parallel::{tree_schedule, ExecPolicy, Job, JobCtx, Stage, StageTimings};
use crate::sketch::{basis_from_sketch, sample_indices_partitioned, sketch, tags, RangeBasis, RngStream, SampleRule};
use crate::tensor::io::{read_dims, read_f64s, read_u32, read_usize, write_dims, write_f64s, write_u64};
use crate::tensor::{extract_group_fibers, unfold, unfold_set, DenseTensor, ModeSet, Shape};
use crate::tucker::sub_r_factor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub modes: ModeSet,
    pub children: Option<(usize, usize)>,
    pub parent: Option<usize>,
}

/// Binary tree over mode subsets. Node 0 is the root; nodes are numbered
/// level by level, left to right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionTree {
    order: usize,
    nodes: Vec<TreeNode>,
}

impl DimensionTree {
    /// Recursive halving: a node with `m` modes keeps the first `⌈m/2⌉` on the left.
    pub fn balanced(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!("a dimension tree needs at least 2 modes, got {d}")));
        }
        let mut spans: Vec<(usize, usize)> = vec![(0, d)];
        let mut children: Vec<Option<(usize, usize)>> = vec![None];
        let mut queue = VecDeque::from([0usize]);
        while let Some(id) = queue.pop_front() {
            let (a, b) = spans[id];
            if b - a < 2 {
                continue;
            }
            let mid = a + (b - a).div_ceil(2);
            let left = spans.len();
            spans.push((a, mid));
            spans.push((mid, b));
            children.push(None);
            children.push(None);
            children[id] = Some((left, left + 1));
            queue.push_back(left);
            queue.push_back(left + 1);
        }
        let nodes = spans
            .iter()
            .zip(children)
            .map(|(&(a, b), c)| (ModeSet::new((a..b).collect::<Vec<_>>()).expect("non-empty span"), c))
            .collect();
        Self::from_nodes(d, nodes)
    }

    /// Builds and validates a tree from `(modes, children)` pairs, root first.
    ///
    /// Children must partition their parent, and every mode of the left child
    /// must be smaller than every mode of the right child.
    pub fn from_nodes(d: usize, nodes: Vec<(ModeSet, Option<(usize, usize)>)>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 || nodes[0].0 != ModeSet::full(d) {
            return Err(Error::invalid("the root must hold every mode"));
        }
        let mut parent: Vec<Option<usize>> = vec![None; n];
        for (id, (modes, ch)) in nodes.iter().enumerate() {
            if modes.modes().iter().any(|&m| m >= d) {
                return Err(Error::invalid(format!("node {id} refers to a mode outside 0..{d}")));
            }
            match ch {
                None if modes.len() != 1 => {
                    return Err(Error::invalid(format!("leaf {id} must hold a single mode, has {modes}")));
                }
                None => {}
                Some((l, r)) => {
                    let (l, r) = (*l, *r);
                    if l >= n || r >= n || l == id || r == id || l == r {
                        return Err(Error::invalid(format!("node {id} has invalid children ({l}, {r})")));
                    }
                    for c in [l, r] {
                        if parent[c].replace(id).is_some() {
                            return Err(Error::invalid(format!("node {c} has two parents")));
                        }
                    }
                    let (lm, rm) = (nodes[l].0.modes(), nodes[r].0.modes());
                    let mut union: Vec<usize> = lm.iter().chain(rm).copied().collect();
                    union.sort_unstable();
                    if union != modes.modes() {
                        return Err(Error::invalid(format!("children of node {id} do not partition {modes}")));
                    }
                    if lm.last() >= rm.first() {
                        return Err(Error::invalid(format!(
                            "left child of node {id} must hold the lower modes"
                        )));
                    }
                }
            }
        }
        if parent[0].is_some() || parent[1..].iter().any(Option::is_none) {
            return Err(Error::invalid("every node except the root needs exactly one parent"));
        }
        let tree = Self {
            order: d,
            nodes: nodes
                .into_iter()
                .zip(parent)
                .map(|((modes, children), parent)| TreeNode { modes, children, parent })
                .collect(),
        };
        // reachability: the partition rule plus a unique parent per node
        // leaves a forest; the leaf count pins it to one tree over all modes
        if tree.leaves().len() != d {
            return Err(Error::invalid("tree leaves must cover each mode exactly once"));
        }
        Ok(tree)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_none()
    }

    /// Leaf node ids, ordered by mode.
    pub fn leaves(&self) -> Vec<usize> {
        let mut leaves: Vec<(usize, usize)> = (0..self.len())
            .filter(|&id| self.is_leaf(id))
            .map(|id| (self.nodes[id].modes.modes()[0], id))
            .collect();
        leaves.sort_unstable();
        leaves.dedup_by_key(|p| p.0);
        leaves.into_iter().map(|(_, id)| id).collect()
    }

    /// Internal node ids except the root, in id order.
    pub fn inner(&self) -> Vec<usize> {
        (1..self.len()).filter(|&id| !self.is_leaf(id)).collect()
    }

    /// Distance from the root (root = 0).
    pub fn level(&self, mut id: usize) -> usize {
        let mut level = 0;
        while let Some(p) = self.nodes[id].parent {
            id = p;
            level += 1;
        }
        level
    }

    pub fn depth(&self) -> usize {
        (0..self.len()).map(|id| self.level(id)).max().unwrap_or(0)
    }
}

/// Rank `r` at every node except the root, which always has rank 1.
pub fn uniform_ranks(tree: &DimensionTree, r: usize) -> Vec<usize> {
    (0..tree.len()).map(|id| if id == 0 { 1 } else { r }).collect()
}

/// Leaf factors plus one order-3 transfer tensor per internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct HTuckerDecomposition {
    tree: DimensionTree,
    dims: Vec<usize>,
    leaf_factors: Vec<Matrix>,
    transfers: Vec<Option<DenseTensor>>,
}

impl HTuckerDecomposition {
    /// `leaf_factors[k]` belongs to mode `k`; `transfers[id]` is `Some` exactly
    /// for internal nodes and has shape `(r_S, r_ℓ, r_r)`, `(1, r_ℓ, r_r)` at the root.
    pub fn new(tree: DimensionTree, leaf_factors: Vec<Matrix>, transfers: Vec<Option<DenseTensor>>) -> Result<Self> {
        let d = tree.order();
        if leaf_factors.len() != d || transfers.len() != tree.len() {
            return Err(Error::invalid("leaf factor or transfer count does not match the tree"));
        }
        let dims: Vec<usize> = leaf_factors.iter().map(|u| u.nrows()).collect();
        let h = Self { tree, dims, leaf_factors, transfers };
        for id in 0..h.tree.len() {
            match (h.tree.node(id).children, &h.transfers[id]) {
                (None, None) => {}
                (Some((l, r)), Some(b)) => {
                    let want = [if id == 0 { 1 } else { b.dims()[0] }, h.rank(l), h.rank(r)];
                    if b.order() != 3 || b.dims() != want {
                        return Err(Error::invalid(format!(
                            "transfer tensor at node {id} has shape {:?}, expected {want:?}",
                            b.dims()
                        )));
                    }
                }
                _ => return Err(Error::invalid(format!("node {id}: transfer tensor presence does not match the tree"))),
            }
        }
        Ok(h)
    }

    pub fn tree(&self) -> &DimensionTree {
        &self.tree
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn leaf_factors(&self) -> &[Matrix] {
        &self.leaf_factors
    }

    pub fn transfer(&self, id: usize) -> Option<&DenseTensor> {
        self.transfers[id].as_ref()
    }

    /// Number of basis columns at a node (1 at the root).
    pub fn rank(&self, id: usize) -> usize {
        match &self.transfers[id] {
            _ if id == 0 => 1,
            Some(b) => b.dims()[0],
            None => self.leaf_factors[self.tree.node(id).modes.modes()[0]].ncols(),
        }
    }

    /// Ranks of all nodes in id order.
    pub fn ranks(&self) -> Vec<usize> {
        (0..self.tree.len()).map(|id| self.rank(id)).collect()
    }

    /// Basis `U_S` of a node, expanded from the leaves.
    pub fn node_basis(&self, id: usize) -> Result<Matrix> {
        match self.tree.node(id).children {
            None => Ok(self.leaf_factors[self.tree.node(id).modes.modes()[0]].clone()),
            Some((l, r)) => {
                let (ul, ur) = (self.node_basis(l)?, self.node_basis(r)?);
                expand(ul.as_ref(), ur.as_ref(), self.transfers[id].as_ref().expect("internal node"))
            }
        }
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        ht_reconstruct(self)
    }
}

/// `U_S` from children bases and `B_S`, never forming a Kronecker product.
pub fn expand(ul: MatRef<'_, f64>, ur: MatRef<'_, f64>, b: &DenseTensor) -> Result<Matrix> {
    let (rs, rl, rr) = (b.dims()[0], b.dims()[1], b.dims()[2]);
    if b.order() != 3 || ul.ncols() != rl || ur.ncols() != rr {
        return Err(Error::invalid(format!(
            "transfer tensor {:?} does not fit children with {} and {} columns",
            b.dims(),
            ul.ncols(),
            ur.ncols()
        )));
    }
    let (nl, nr) = (ul.nrows(), ur.nrows());
    let mut out = Mat::zeros(nl * nr, rs);
    for i in 0..rs {
        let bi = Mat::from_fn(rl, rr, |j, k| b.get(&[i, j, k]));
        let m = mul(mul(ul, bi.as_ref()).as_ref(), ur.transpose());
        let col = out.col_as_slice_mut(i);
        for c in 0..nr {
            col[c * nl..(c + 1) * nl].copy_from_slice(m.col_as_slice(c));
        }
    }
    Ok(out)
}

/// `B_S(i,j,k) = ⟨u_i, (U_r ⊗ U_ℓ) e_{j + r_ℓ k}⟩`, computed by reshaping each
/// `u_i` to `n_ℓ × n_r` and contracting with the children from both sides.
pub fn transfer_tensor(us: MatRef<'_, f64>, ul: MatRef<'_, f64>, ur: MatRef<'_, f64>) -> Result<DenseTensor> {
    let (nl, nr) = (ul.nrows(), ur.nrows());
    if us.nrows() != nl * nr {
        return Err(Error::invalid(format!(
            "node basis has {} rows, children give {nl}·{nr}",
            us.nrows()
        )));
    }
    let (rs, rl, rr) = (us.ncols(), ul.ncols(), ur.ncols());
    let mut data = vec![0.0; rs * rl * rr];
    let mut col = vec![0.0; us.nrows()];
    for i in 0..rs {
        for (t, v) in col.iter_mut().enumerate() {
            *v = us[(t, i)];
        }
        let bi = mul(mul_tn(ul, view(&col, nl, nr)).as_ref(), ur);
        for k in 0..rr {
            for j in 0..rl {
                data[i + rs * (j + rl * k)] = bi[(j, k)];
            }
        }
    }
    DenseTensor::new(Shape::new(vec![rs, rl, rr])?, data)
}

/// Root coefficients `B_R(0,j,k) = ⟨vec X, (U_r ⊗ U_ℓ) e_{j + r_ℓ k}⟩`.
pub fn root_transfer(x: &DenseTensor, ul: MatRef<'_, f64>, ur: MatRef<'_, f64>) -> Result<DenseTensor> {
    let (nl, nr) = (ul.nrows(), ur.nrows());
    if nl * nr != x.len() {
        return Err(Error::invalid(format!(
            "children give {nl}·{nr} rows, tensor has {} entries",
            x.len()
        )));
    }
    let b = mul(mul_tn(ul, view(x.data(), nl, nr)).as_ref(), ur);
    let (rl, rr) = (ul.ncols(), ur.ncols());
    DenseTensor::new(Shape::new(vec![1, rl, rr])?, (0..rr).flat_map(|k| (0..rl).map(move |j| (j, k))).map(|(j, k)| b[(j, k)]).collect())
}

/// Expands the tree bottom-up and refolds the root into the full tensor.
pub fn ht_reconstruct(h: &HTuckerDecomposition) -> Result<DenseTensor> {
    let (l, r) = h.tree.node(0).children.expect("root is internal");
    let (ul, ur) = (h.node_basis(l)?, h.node_basis(r)?);
    let v = expand(ul.as_ref(), ur.as_ref(), h.transfers[0].as_ref().expect("root transfer"))?;
    DenseTensor::new(Shape::new(h.dims.clone())?, v.col_as_slice(0).to_vec())
}

/// Stored scalars: leaf factors plus every transfer tensor, root included.
pub fn ht_storage_count(h: &HTuckerDecomposition) -> usize {
    h.leaf_factors.iter().map(|u| u.nrows() * u.ncols()).sum::<usize>()
        + h.transfers.iter().flatten().map(DenseTensor::len).sum::<usize>()
}

/// Outcome of an H-Tucker run.
#[derive(Debug, Clone)]
pub struct HtRun {
    pub decomposition: HTuckerDecomposition,
    /// Numerical rank per node (1 at the root).
    pub achieved_ranks: Vec<usize>,
    /// Fibers sampled per node, for the sampled method (0 at the root).
    pub samples: Option<Vec<usize>>,
    pub timings: StageTimings,
    pub max_in_flight: usize,
}

fn node_sizes(dims: &[usize], tree: &DimensionTree, id: usize) -> (usize, usize) {
    let inside: usize = tree.node(id).modes.iter().map(|m| dims[m]).product();
    (inside, dims.iter().product::<usize>() / inside)
}

fn check_tree_ranks(x: &DenseTensor, tree: &DimensionTree, ranks: &[usize]) -> Result<()> {
    if tree.order() != x.order() {
        return Err(Error::invalid(format!("tree has {} modes, tensor has {}", tree.order(), x.order())));
    }
    if ranks.len() != tree.len() {
        return Err(Error::invalid(format!("{} ranks for a tree of {} nodes", ranks.len(), tree.len())));
    }
    for (id, &r) in ranks.iter().enumerate().skip(1) {
        let (inside, outside) = node_sizes(x.dims(), tree, id);
        let limit = inside.min(outside);
        if r == 0 || r > limit {
            return Err(Error::invalid(format!("rank {r} at node {id} outside 1..={limit}")));
        }
    }
    Ok(())
}

fn assemble(
    tree: &DimensionTree,
    bases: &[Option<Matrix>],
    transfers: Vec<Option<DenseTensor>>,
) -> Result<HTuckerDecomposition> {
    let leaf_factors = tree.leaves().iter().map(|&id| bases[id].clone().expect("leaf basis")).collect();
    HTuckerDecomposition::new(tree.clone(), leaf_factors, transfers)
}

/// Root-to-leaves HT: every node basis from the SVD of its own unfolding.
pub fn rtl_ht(x: &DenseTensor, tree: &DimensionTree, ranks: &[usize]) -> Result<HtRun> {
    check_tree_ranks(x, tree, ranks)?;
    let mut ctx = JobCtx::new(0);
    let mut bases: Vec<Option<Matrix>> = vec![None; tree.len()];
    for id in 1..tree.len() {
        let modes = &tree.node(id).modes;
        let a = ctx.time(Stage::Gather, || {
            if modes.len() == 1 { unfold(x, modes.modes()[0]) } else { unfold_set(x, modes) }
        })?;
        bases[id] = Some(ctx.time(Stage::Factor, || truncated_svd(a.as_ref(), ranks[id]))?.u);
    }
    let mut transfers: Vec<Option<DenseTensor>> = vec![None; tree.len()];
    for id in 0..tree.len() {
        if let Some((l, r)) = tree.node(id).children {
            let (ul, ur) = (bases[l].as_ref().expect("child basis").as_ref(), bases[r].as_ref().expect("child basis").as_ref());
            let b = if id == 0 {
                ctx.time(Stage::SerialTail, || root_transfer(x, ul, ur))?
            } else {
                ctx.time(Stage::Ttm, || transfer_tensor(bases[id].as_ref().expect("basis").as_ref(), ul, ur))?
            };
            transfers[id] = Some(b);
        }
    }
    Ok(HtRun {
        decomposition: assemble(tree, &bases, transfers)?,
        achieved_ranks: ranks.to_vec(),
        samples: None,
        timings: ctx.timings,
        max_in_flight: 1,
    })
}

/// Fibers per node for Sub-R-RtL-HT, validated against `r_S + p ≤ w_S ≤ n_{∉S}`.
pub fn resolve_node_samples(
    x: &DenseTensor,
    tree: &DimensionTree,
    ranks: &[usize],
    rule: &SampleRule,
    oversample: usize,
) -> Result<Vec<usize>> {
    let mut out = vec![0; tree.len()];
    for id in 1..tree.len() {
        let (inside, outside) = node_sizes(x.dims(), tree, id);
        let w = rule.resolve(id, inside, outside)?;
        let need = ranks[id] + oversample;
        if w < need || w > outside {
            return Err(Error::invalid(format!(
                "node {id}: {w} samples outside {need}..={outside} (rank + oversampling up to fiber count)"
            )));
        }
        out[id] = w;
    }
    Ok(out)
}

/// Basis for an internal node from `w` sampled group fibers.
#[allow(clippy::too_many_arguments)]
pub fn sub_r_node_basis(
    x: &DenseTensor,
    modes: &ModeSet,
    r: usize,
    w: usize,
    p: usize,
    stream: RngStream,
    partitions: usize,
    ctx: &mut JobCtx,
) -> Result<RangeBasis> {
    let outside = x.len() / modes.iter().map(|m| x.dims()[m]).product::<usize>();
    let idx = ctx.time(Stage::Sampling, || {
        sample_indices_partitioned(outside, w, partitions.clamp(1, w), stream.substream(tags::SAMPLING))
    })?;
    let y = ctx.time(Stage::Sampling, || extract_group_fibers(x, modes, &idx))?;
    let z = ctx.time(Stage::Sketch, || sketch(&y, r + p, stream.substream(tags::SKETCH)));
    ctx.time(Stage::Factor, || basis_from_sketch(&z, r, stream.substream(tags::PADDING)))
}

enum NodeOut {
    Basis(RangeBasis),
    Transfer(DenseTensor),
}

impl NodeOut {
    fn basis(&self) -> &Matrix {
        match self {
            NodeOut::Basis(b) => &b.q,
            NodeOut::Transfer(_) => unreachable!("dependency is a basis job"),
        }
    }
}

/// Job graph of Sub-R-RtL-HT: one basis job per non-root node (ids in node
/// order minus one), one transfer job per non-root internal node, then the
/// root. Returns the dependency lists and a `(kind, node)` label per job.
pub fn ht_job_graph(tree: &DimensionTree, emulate_serial_root: bool) -> (Vec<Vec<usize>>, Vec<(HtJobKind, usize)>) {
    let basis_job = |id: usize| id - 1;
    let mut deps: Vec<Vec<usize>> = (1..tree.len()).map(|_| Vec::new()).collect();
    let mut labels: Vec<(HtJobKind, usize)> = (1..tree.len()).map(|id| (HtJobKind::Basis, id)).collect();
    for id in tree.inner() {
        let (l, r) = tree.node(id).children.expect("internal");
        deps.push(vec![basis_job(id), basis_job(l), basis_job(r)]);
        labels.push((HtJobKind::Transfer, id));
    }
    // the root closure reads its children's bases from the first two slots
    let (l, r) = tree.node(0).children.expect("root is internal");
    let mut root_deps = vec![basis_job(l), basis_job(r)];
    if emulate_serial_root {
        root_deps.extend((0..tree.len() - 1).filter(|&j| j != basis_job(l) && j != basis_job(r)));
    }
    deps.push(root_deps);
    labels.push((HtJobKind::Root, 0));
    (deps, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HtJobKind {
    Basis,
    Transfer,
    Root,
}

/// Subsampled randomized RtL-HT.
///
/// Node bases are independent jobs; each transfer job waits for its node and
/// both children; the root waits for its two children only, unless
/// `emulate_serial_root` asks it to wait for every basis.
pub fn sub_r_rtl_ht(
    x: &DenseTensor,
    tree: &DimensionTree,
    ranks: &[usize],
    samples: &SampleRule,
    oversample: usize,
    seed: u64,
    exec: &ExecPolicy,
) -> Result<HtRun> {
    check_tree_ranks(x, tree, ranks)?;
    exec.validate()?;
    if oversample < crate::sketch::DEFAULT_OVERSAMPLE {
        log::warn!("oversampling {oversample} is below the recommended {}", crate::sketch::DEFAULT_OVERSAMPLE);
    }
    let w = resolve_node_samples(x, tree, ranks, samples, oversample)?;
    let d = tree.order();
    let parts = exec.index_partitions;
    let (deps, labels) = ht_job_graph(tree, exec.emulate_serial_root);
    let jobs: Vec<Job<'_, NodeOut>> = deps
        .into_iter()
        .zip(&labels)
        .map(|(deps, &(kind, id))| {
            let w = &w;
            match kind {
                HtJobKind::Basis => Job::new(format!("basis {id}"), deps, move |_: &[&NodeOut], ctx: &mut JobCtx| {
                    let node = tree.node(id);
                    let b = if node.children.is_none() {
                        sub_r_factor(x, node.modes.modes()[0], ranks[id], w[id], oversample, seed, parts, ctx)?
                    } else {
                        let stream = RngStream::new(seed, (d + id) as u64);
                        sub_r_node_basis(x, &node.modes, ranks[id], w[id], oversample, stream, parts, ctx)?
                    };
                    Ok(NodeOut::Basis(b))
                }),
                HtJobKind::Transfer => Job::new(format!("transfer {id}"), deps, move |inp: &[&NodeOut], ctx: &mut JobCtx| {
                    let t = ctx.time(Stage::Ttm, || {
                        transfer_tensor(inp[0].basis().as_ref(), inp[1].basis().as_ref(), inp[2].basis().as_ref())
                    })?;
                    Ok(NodeOut::Transfer(t))
                }),
                HtJobKind::Root => Job::new("root", deps, move |inp: &[&NodeOut], ctx: &mut JobCtx| {
                    let t = ctx.time(Stage::SerialTail, || {
                        root_transfer(x, inp[0].basis().as_ref(), inp[1].basis().as_ref())
                    })?;
                    Ok(NodeOut::Transfer(t))
                }),
            }
        })
        .collect();
    let schedule = tree_schedule(jobs, exec)?;

    let mut bases: Vec<Option<Matrix>> = vec![None; tree.len()];
    let mut achieved = vec![1; tree.len()];
    let mut transfers: Vec<Option<DenseTensor>> = vec![None; tree.len()];
    for (out, &(_, id)) in schedule.results.into_iter().zip(&labels) {
        match out {
            NodeOut::Basis(b) => {
                achieved[id] = b.achieved_rank;
                bases[id] = Some(b.q);
            }
            NodeOut::Transfer(t) => transfers[id] = Some(t),
        }
    }
    Ok(HtRun {
        decomposition: assemble(tree, &bases, transfers)?,
        achieved_ranks: achieved,
        samples: Some(w),
        timings: schedule.timings,
        max_in_flight: schedule.max_in_flight,
    })
}

/// Per-unit costs (seconds) for the simulated scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Per column of the complement when generating sampled column indices.
    pub per_index: f64,
    /// Per tensor entry read while gathering fibers.
    pub per_read: f64,
    /// Per floating-point multiply-add.
    pub per_flop: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { per_index: 5e-9, per_read: 1e-9, per_flop: 5e-11 }
    }
}

/// Modelled cost of every job in [`ht_job_graph`] for a Sub-R-RtL-HT run.
///
/// Index generation is charged per complement column, as an implementation
/// that permutes the full index range would pay it.
pub fn ht_job_costs(
    dims: &[usize],
    tree: &DimensionTree,
    ranks: &[usize],
    samples: &[usize],
    oversample: usize,
    model: &CostModel,
) -> Vec<f64> {
    let (_, labels) = ht_job_graph(tree, false);
    let total: usize = dims.iter().product();
    labels
        .iter()
        .map(|&(kind, id)| {
            let (inside, outside) = node_sizes(dims, tree, id);
            let width = (ranks[id] + oversample) as f64;
            match kind {
                HtJobKind::Basis => {
                    let gathered = inside as f64 * samples[id] as f64;
                    model.per_index * outside as f64
                        + model.per_read * gathered
                        + model.per_flop * (gathered * width + inside as f64 * width * width)
                }
                HtJobKind::Transfer | HtJobKind::Root => {
                    let (l, r) = tree.node(id).children.expect("internal");
                    let (rl, rr) = (ranks[l] as f64, ranks[r] as f64);
                    let rows = if id == 0 { total as f64 } else { inside as f64 };
                    let cols = if id == 0 { 1.0 } else { ranks[id] as f64 };
                    model.per_read * rows * cols + model.per_flop * cols * (rows * rl + rl * rr * node_sizes(dims, tree, r).0 as f64)
                }
            }
        })
        .collect()
}

const HT_MAGIC: &[u8; 4] = b"SRHT";
const HT_VERSION: u32 = 1;
const NO_CHILD: u64 = u64::MAX;

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    write_dims(w, &[m.nrows(), m.ncols()])?;
    for j in 0..m.ncols() {
        write_f64s(w, m.col_as_slice(j))?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let dims = read_dims(r)?;
    if dims.len() != 2 {
        return Err(Error::Format("matrix block must have two dimensions".into()));
    }
    let data = read_f64s(r, dims[0] * dims[1])?;
    Ok(Mat::from_fn(dims[0], dims[1], |i, j| data[i + dims[0] * j]))
}

/// Container: magic `SRHT`, version, order, node list (mode sets and child
/// ids in node order), leaf factors by mode, then transfer tensors in node order.
pub fn write_htucker(h: &HTuckerDecomposition, w: &mut impl Write) -> Result<()> {
    w.write_all(HT_MAGIC)?;
    w.write_all(&HT_VERSION.to_le_bytes())?;
    write_u64(w, h.tree.order() as u64)?;
    write_u64(w, h.tree.len() as u64)?;
    for node in h.tree.nodes() {
        write_dims(w, node.modes.modes())?;
        let (l, r) = node.children.map_or((NO_CHILD, NO_CHILD), |(l, r)| (l as u64, r as u64));
        write_u64(w, l)?;
        write_u64(w, r)?;
    }
    for u in &h.leaf_factors {
        write_matrix(w, u)?;
    }
    for b in h.transfers.iter().flatten() {
        write_dims(w, b.dims())?;
        write_f64s(w, b.data())?;
    }
    Ok(())
}

pub fn read_htucker(r: &mut impl Read) -> Result<HTuckerDecomposition> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != HT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected SRHT")));
    }
    let version = read_u32(r)?;
    if version != HT_VERSION {
        return Err(Error::Format(format!("unsupported SRHT version {version}")));
    }
    let d = read_usize(r)?;
    let n = read_usize(r)?;
    if d == 0 || d > 64 || n != 2 * d - 1 {
        return Err(Error::Format(format!("implausible tree: order {d}, {n} nodes")));
    }
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let modes = ModeSet::new(read_dims(r)?).map_err(|e| Error::Format(e.to_string()))?;
        let (l, rr) = (crate::tensor::io::read_u64(r)?, crate::tensor::io::read_u64(r)?);
        let children = if l == NO_CHILD { None } else { Some((l as usize, rr as usize)) };
        nodes.push((modes, children));
    }
    let tree = DimensionTree::from_nodes(d, nodes).map_err(|e| Error::Format(e.to_string()))?;
    let leaf_factors = (0..d).map(|_| read_matrix(r)).collect::<Result<Vec<_>>>()?;
    let mut transfers = vec![None; n];
    for (id, slot) in transfers.iter_mut().enumerate() {
        if !tree.is_leaf(id) {
            let shape = Shape::new(read_dims(r)?)?;
            let len = shape.len();
            *slot = Some(DenseTensor::new(shape, read_f64s(r, len)?)?);
        }
    }
    HTuckerDecomposition::new(tree, leaf_factors, transfers).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_htucker(h: &HTuckerDecomposition, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_htucker(h, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_htucker(path: impl AsRef<Path>) -> Result<HTuckerDecomposition> {
    read_htucker(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, orthonormality_defect};
    use crate::parallel::simulate_schedule;
    use crate::tensor::rel_error;
    use crate::testutil::{mat, max_abs_diff, median, orthonormal, planted_ht, random_tensor};

    fn set(v: &[usize]) -> ModeSet {
        ModeSet::new(v.to_vec()).unwrap()
    }

    /// Explicit `n_ℓ n_r × r_ℓ r_r` Kronecker matrix in the crate's convention.
    fn kron(ul: &Matrix, ur: &Matrix) -> Matrix {
        let (nl, rl) = (ul.nrows(), ul.ncols());
        mat(nl * ur.nrows(), rl * ur.ncols(), |t, c| ul[(t % nl, c % rl)] * ur[(t / nl, c / rl)])
    }

    #[test]
    fn balanced_trees() {
        let t2 = DimensionTree::balanced(2).unwrap();
        assert_eq!(t2.len(), 3);
        assert_eq!(t2.node(1).modes, set(&[0]));
        assert_eq!(t2.node(2).modes, set(&[1]));
        let t8 = DimensionTree::balanced(8).unwrap();
        let expect = [
            vec![0, 1, 2, 3, 4, 5, 6, 7],
            vec![0, 1, 2, 3],
            vec![4, 5, 6, 7],
            vec![0, 1],
            vec![2, 3],
            vec![4, 5],
            vec![6, 7],
        ];
        for (id, m) in expect.iter().enumerate() {
            assert_eq!(t8.node(id).modes, set(m));
        }
        assert_eq!(t8.depth(), 3);
        assert_eq!(t8.inner().len(), 6);
        let t5 = DimensionTree::balanced(5).unwrap();
        assert_eq!(t5.node(1).modes, set(&[0, 1, 2]));
        assert_eq!(t5.node(2).modes, set(&[3, 4]));
        for d in 2..12 {
            let t = DimensionTree::balanced(d).unwrap();
            assert_eq!(t.depth(), (d as f64).log2().ceil() as usize);
            assert_eq!(t.len(), 2 * d - 1);
        }
        assert!(DimensionTree::balanced(1).is_err());
    }

    #[test]
    fn malformed_trees_rejected() {
        let bad_partition = vec![(set(&[0, 1, 2]), Some((1, 2))), (set(&[0]), None), (set(&[1]), None)];
        assert!(DimensionTree::from_nodes(3, bad_partition).is_err());
        let swapped = vec![(set(&[0, 1]), Some((1, 2))), (set(&[1]), None), (set(&[0]), None)];
        assert!(DimensionTree::from_nodes(2, swapped).is_err());
        let fat_leaf = vec![(set(&[0, 1]), None)];
        assert!(DimensionTree::from_nodes(2, fat_leaf).is_err());
        let good = vec![(set(&[0, 1]), Some((1, 2))), (set(&[0]), None), (set(&[1]), None)];
        assert!(DimensionTree::from_nodes(2, good).is_ok());
    }

    #[test]
    fn self_expansion_gives_selection_pattern() {
        let (ul, ur) = (orthonormal(3, 2, 1), orthonormal(4, 2, 2));
        let us = kron(&ul, &ur);
        let b = transfer_tensor(us.as_ref(), ul.as_ref(), ur.as_ref()).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..2 {
                    let want = if i == j + 2 * k { 1.0 } else { 0.0 };
                    assert!((b.get(&[i, j, k]) - want).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn transfer_matches_kronecker_oracle() {
        let (ul, ur) = (orthonormal(3, 2, 3), orthonormal(3, 2, 4));
        let us = orthonormal(9, 2, 5);
        let b = transfer_tensor(us.as_ref(), ul.as_ref(), ur.as_ref()).unwrap();
        let k = kron(&ul, &ur);
        let oracle = us.transpose() * &k;
        for i in 0..2 {
            for c in 0..4 {
                assert!((b.get(&[i, c % 2, c / 2]) - oracle[(i, c)]).abs() < 1e-13);
            }
        }
        assert!(transfer_tensor(orthonormal(8, 2, 1).as_ref(), ul.as_ref(), ur.as_ref()).is_err());
    }

    #[test]
    fn nested_basis_round_trips() {
        let (ul, ur) = (orthonormal(5, 3, 6), orthonormal(4, 2, 7));
        let us = kron(&ul, &ur) * orthonormal(6, 4, 8);
        let b = transfer_tensor(us.as_ref(), ul.as_ref(), ur.as_ref()).unwrap();
        let back = expand(ul.as_ref(), ur.as_ref(), &b).unwrap();
        assert!(frobenius((&us - &back).as_ref()) <= 1e-10);
    }

    #[test]
    fn root_transfer_cases() {
        let (ul, ur) = (orthonormal(3, 2, 9), orthonormal(4, 3, 10));
        let v1w1: Vec<f64> = (0..12).map(|t| ul[(t % 3, 0)] * ur[(t / 3, 0)]).collect();
        let x = DenseTensor::new(Shape::new(vec![3, 4]).unwrap(), v1w1).unwrap();
        let b = root_transfer(&x, ul.as_ref(), ur.as_ref()).unwrap();
        assert_eq!(b.dims(), &[1, 2, 3]);
        for j in 0..2 {
            for k in 0..3 {
                let want = if (j, k) == (0, 0) { 1.0 } else { 0.0 };
                assert!((b.get(&[0, j, k]) - want).abs() < 1e-13);
            }
        }
        let zero = DenseTensor::zeros(Shape::new(vec![3, 2, 2]).unwrap());
        assert!(root_transfer(&zero, ul.as_ref(), ur.as_ref()).unwrap().data().iter().all(|&v| v == 0.0));
        let x = random_tensor(&[3, 2, 2], 11);
        let b = root_transfer(&x, ul.as_ref(), ur.as_ref()).unwrap();
        let k = kron(&ul, &ur);
        for c in 0..6 {
            let want: f64 = (0..12).map(|t| x.data()[t] * k[(t, c)]).sum();
            assert!((b.get(&[0, c % 2, c / 2]) - want).abs() < 1e-13);
        }
        assert!(root_transfer(&random_tensor(&[5, 2], 1), ul.as_ref(), ur.as_ref()).is_err());
    }

    #[test]
    fn reconstruct_matches_explicit_kronecker() {
        // full ranks on 2x2x2x2: root children {0,1}, {2,3}
        let tree = DimensionTree::balanced(4).unwrap();
        let leaves: Vec<Matrix> = (0..4).map(|k| orthonormal(2, 2, 20 + k)).collect();
        let transfers: Vec<Option<DenseTensor>> = (0..tree.len())
            .map(|id| match id {
                0 => Some(random_tensor(&[1, 4, 4], 30)),
                1 | 2 => Some(random_tensor(&[4, 2, 2], 31 + id as u64)),
                _ => None,
            })
            .collect();
        let h = HTuckerDecomposition::new(tree, leaves.clone(), transfers.clone()).unwrap();
        let got = h.reconstruct().unwrap();
        let b1 = |t: &DenseTensor| mat(t.dims()[0], t.dims()[1] * t.dims()[2], |i, c| t.get(&[i, c % t.dims()[1], c / t.dims()[1]]));
        let u01 = kron(&leaves[0], &leaves[1]) * b1(transfers[1].as_ref().unwrap()).transpose();
        let u23 = kron(&leaves[2], &leaves[3]) * b1(transfers[2].as_ref().unwrap()).transpose();
        let vec_x = kron(&u01, &u23) * b1(transfers[0].as_ref().unwrap()).transpose();
        for t in 0..16 {
            assert!((got.data()[t] - vec_x[(t, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_tensor_round_trip() {
        let x = DenseTensor::new(Shape::new(vec![1, 1, 1]).unwrap(), vec![-2.5]).unwrap();
        let tree = DimensionTree::balanced(3).unwrap();
        let run = rtl_ht(&x, &tree, &uniform_ranks(&tree, 1)).unwrap();
        assert!((run.decomposition.reconstruct().unwrap().data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn storage_counts() {
        let (_, h) = planted_ht(&[4, 4], 2, 1);
        assert_eq!(ht_storage_count(&h), 20);
        let (_, h) = planted_ht(&[3, 5, 2, 4, 6], 1, 2);
        assert_eq!(ht_storage_count(&h), 20 + 4);
        let tree = DimensionTree::balanced(8).unwrap();
        let leaves = vec![Mat::zeros(15, 5); 8];
        let transfers = (0..tree.len())
            .map(|id| tree.node(id).children.map(|_| DenseTensor::zeros(Shape::new(vec![if id == 0 { 1 } else { 5 }, 5, 5]).unwrap())))
            .collect();
        let h = HTuckerDecomposition::new(tree, leaves, transfers).unwrap();
        assert_eq!(ht_storage_count(&h), 1375);
    }

    #[test]
    fn rtl_recovers_planted_tensor() {
        let (tree, h) = planted_ht(&[15, 15, 15, 15], 5, 3);
        let x = h.reconstruct().unwrap();
        let run = rtl_ht(&x, &tree, &uniform_ranks(&tree, 5)).unwrap();
        assert!(rel_error(&x, &run.decomposition.reconstruct().unwrap()).unwrap() <= 1e-10);
        assert!(run.decomposition.leaf_factors().iter().all(|u| orthonormality_defect(u.as_ref()) <= 1e-10));
        for id in run.decomposition.tree().inner() {
            let u = run.decomposition.node_basis(id).unwrap();
            assert!(orthonormality_defect(u.as_ref()) <= 1e-8);
        }
    }

    #[test]
    fn nestedness_against_oracle_unfoldings() {
        let (tree, h) = planted_ht(&[4, 3, 4, 3, 2, 3], 2, 4);
        let x = h.reconstruct().unwrap();
        let ranks = uniform_ranks(&tree, 2);
        let run = rtl_ht(&x, &tree, &ranks).unwrap();
        let direct = |id: usize| {
            let m = &tree.node(id).modes;
            let a = if m.len() == 1 { unfold(&x, m.modes()[0]) } else { unfold_set(&x, m) }.unwrap();
            truncated_svd(a.as_ref(), ranks[id]).unwrap().u
        };
        for id in tree.inner() {
            let (l, r) = tree.node(id).children.unwrap();
            let us = direct(id);
            let rebuilt = expand(direct(l).as_ref(), direct(r).as_ref(), run.decomposition.transfer(id).unwrap()).unwrap();
            assert!(frobenius((&us - &rebuilt).as_ref()) <= 1e-8 * frobenius(us.as_ref()));
        }
    }

    #[test]
    fn two_leaf_tree_is_truncated_svd() {
        let x = random_tensor(&[6, 5], 5);
        let tree = DimensionTree::balanced(2).unwrap();
        let run = rtl_ht(&x, &tree, &uniform_ranks(&tree, 2)).unwrap();
        let svd = truncated_svd(unfold(&x, 0).unwrap().as_ref(), 2).unwrap();
        let us = mat(6, 2, |i, j| svd.u[(i, j)] * svd.s[j]);
        let approx = &us * svd.v.transpose();
        let got = run.decomposition.reconstruct().unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert!((got.get(&[i, j]) - approx[(i, j)]).abs() < 1e-12);
            }
        }
    }

    fn sub_r(x: &DenseTensor, tree: &DimensionTree, r: usize, rule: &SampleRule, seed: u64, exec: &ExecPolicy) -> HtRun {
        sub_r_rtl_ht(x, tree, &uniform_ranks(tree, r), rule, 4, seed, exec).unwrap()
    }

    #[test]
    fn sub_r_recovers_planted_tensor() {
        let (tree, h) = planted_ht(&[8, 8, 8, 8, 8], 3, 5);
        let x = h.reconstruct().unwrap();
        let errs: Vec<f64> = (0..5)
            .map(|seed| {
                let run = sub_r(&x, &tree, 3, &SampleRule::Alpha(20.0), seed, &ExecPolicy::default());
                rel_error(&x, &run.decomposition.reconstruct().unwrap()).unwrap()
            })
            .collect();
        assert!(median(errs) <= 1e-7);
    }

    #[test]
    fn sub_r_full_sampling_is_exact() {
        let (tree, h) = planted_ht(&[5, 4, 5, 4], 2, 6);
        let x = h.reconstruct().unwrap();
        let full: Vec<usize> = (0..tree.len()).map(|id| if id == 0 { 0 } else { node_sizes(x.dims(), &tree, id).1 }).collect();
        let run = sub_r_rtl_ht(&x, &tree, &uniform_ranks(&tree, 2), &SampleRule::PerTarget(full.clone()), 2, 1, &ExecPolicy::default()).unwrap();
        assert!(rel_error(&x, &run.decomposition.reconstruct().unwrap()).unwrap() <= 1e-9);
        assert_eq!(run.samples.unwrap(), full);
    }

    #[test]
    fn alpha_rule_caps_at_fiber_count() {
        let (tree, h) = planted_ht(&[6, 6, 6, 6], 2, 7);
        let x = h.reconstruct().unwrap();
        let w = resolve_node_samples(&x, &tree, &uniform_ranks(&tree, 2), &SampleRule::Alpha(20.0), 4).unwrap();
        // leaves: 20·6 = 120 of 216; pairs: min(20·36, 36) = 36
        assert_eq!(w, vec![0, 36, 36, 120, 120, 120, 120]);
    }

    #[test]
    fn sub_r_is_worker_independent() {
        let (tree, h) = planted_ht(&[6, 5, 6, 5, 6], 2, 8);
        let x = h.reconstruct().unwrap();
        let rule = SampleRule::Alpha(10.0);
        let base = sub_r(&x, &tree, 2, &rule, 3, &ExecPolicy::default()).decomposition;
        for w in [2, 4, 8] {
            for emulate in [false, true] {
                let exec = ExecPolicy { workers: w, emulate_serial_root: emulate, ..ExecPolicy::default() };
                let run = sub_r(&x, &tree, 2, &rule, 3, &exec);
                assert_eq!(run.decomposition, base);
                assert!(run.max_in_flight <= w);
            }
        }
    }

    #[test]
    fn job_graph_shape() {
        let tree = DimensionTree::balanced(8).unwrap();
        let (deps, labels) = ht_job_graph(&tree, false);
        assert_eq!(labels.iter().filter(|l| l.0 == HtJobKind::Basis).count(), 14);
        assert!(deps[..14].iter().all(Vec::is_empty));
        assert_eq!(deps.last().unwrap(), &vec![0, 1]);
        let (deps, _) = ht_job_graph(&tree, true);
        assert_eq!(deps.last().unwrap().len(), 14);
        let sim = simulate_schedule(&vec![1.0; deps.len()], &deps, 14).unwrap();
        assert_eq!(sim.max_in_flight, 14);
    }

    #[test]
    fn cost_model_shows_little_gain_from_four_to_seven_workers() {
        let tree = DimensionTree::balanced(8).unwrap();
        let dims = [16; 8];
        let ranks = uniform_ranks(&tree, 6);
        let w: Vec<usize> = (0..tree.len())
            .map(|id| if id == 0 { 0 } else { let (i, o) = node_sizes(&dims, &tree, id); (20 * i).min(o) })
            .collect();
        let costs = ht_job_costs(&dims, &tree, &ranks, &w, 4, &CostModel::default());
        let (deps, _) = ht_job_graph(&tree, true);
        let t4 = simulate_schedule(&costs, &deps, 4).unwrap().makespan;
        let t7 = simulate_schedule(&costs, &deps, 7).unwrap().makespan;
        assert!(t7 <= t4 && (t4 - t7) / t4 < 0.10, "{t4} {t7}");
    }

    #[test]
    fn container_round_trip() {
        let (_, h) = planted_ht(&[3, 4, 2, 5, 3], 2, 9);
        let mut bytes = Vec::new();
        write_htucker(&h, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SRHT");
        let back = read_htucker(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, h);
        assert_eq!(max_abs_diff(&back.reconstruct().unwrap(), &h.reconstruct().unwrap()), 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.srht");
        save_htucker(&h, &path).unwrap();
        assert_eq!(load_htucker(&path).unwrap(), h);
        bytes[0] = b'X';
        assert!(matches!(read_htucker(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
