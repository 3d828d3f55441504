//! Mode-parallel and tree-parallel execution.
//!
//! Every job is a pure function of immutable inputs plus its own random
//! stream, so results never depend on the worker count. Only timings do.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Instant;

use faer::MatRef;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::{ttm_t, DenseTensor, Shape};

/// How a decomposition distributes its work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecPolicy {
    pub workers: usize,
    /// Mode along which the core assembly slices the tensor; `None` picks one.
    pub slice_mode: Option<usize>,
    /// Number of sub-intervals for fiber-index sampling.
    pub index_partitions: usize,
    /// Make the root transfer wait for every basis computation.
    pub emulate_serial_root: bool,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        Self { workers: 1, slice_mode: None, index_partitions: 1, emulate_serial_root: false }
    }
}

impl ExecPolicy {
    pub fn with_workers(workers: usize) -> Self {
        Self { workers, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.index_partitions == 0 {
            return Err(Error::invalid("index partitions must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sampling,
    Sketch,
    Factor,
    Ttm,
    Gather,
    SerialTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub worker: usize,
    pub seconds: f64,
}

/// Wall-clock durations per stage and worker.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimings {
    pub records: Vec<StageRecord>,
}

impl StageTimings {
    pub fn push(&mut self, stage: Stage, worker: usize, seconds: f64) {
        self.records.push(StageRecord { stage, worker, seconds: seconds.max(0.0) });
    }

    pub fn extend(&mut self, other: StageTimings) {
        self.records.extend(other.records);
    }

    /// Sum over all workers for one stage.
    pub fn stage_total(&self, stage: Stage) -> f64 {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.seconds).sum()
    }

    /// Busiest worker's time in one stage, a proxy for that stage's wall time.
    pub fn stage_span(&self, stage: Stage) -> f64 {
        let mut per_worker: Vec<(usize, f64)> = Vec::new();
        for r in self.records.iter().filter(|r| r.stage == stage) {
            match per_worker.iter_mut().find(|(w, _)| *w == r.worker) {
                Some((_, s)) => *s += r.seconds,
                None => per_worker.push((r.worker, r.seconds)),
            }
        }
        per_worker.into_iter().map(|(_, s)| s).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.records).expect("timings serialize")
    }
}

/// Per-job timing context handed to job closures.
#[derive(Debug, Default)]
pub struct JobCtx {
    pub worker: usize,
    pub timings: StageTimings,
}

impl JobCtx {
    pub fn new(worker: usize) -> Self {
        Self { worker, timings: StageTimings::default() }
    }

    pub fn time<R>(&mut self, stage: Stage, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        self.timings.push(stage, self.worker, start.elapsed().as_secs_f64());
        out
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))
}

/// Runs `tasks` independent jobs over `policy.workers` threads.
///
/// Results come back in task order; a failing task is reported with its index.
pub fn parallel_factors<T, F>(tasks: usize, policy: &ExecPolicy, job: F) -> Result<(Vec<T>, StageTimings)>
where
    T: Send,
    F: Fn(usize, &mut JobCtx) -> Result<T> + Sync,
{
    policy.validate()?;
    let run = |task: usize| {
        let mut ctx = JobCtx::new(rayon::current_thread_index().unwrap_or(0));
        job(task, &mut ctx)
            .map(|v| (v, ctx.timings))
            .map_err(|e| Error::Job { task, source: Box::new(e) })
    };
    let outcomes: Vec<Result<(T, StageTimings)>> = if policy.workers == 1 {
        (0..tasks).map(|t| {
            let mut ctx = JobCtx::new(0);
            job(t, &mut ctx).map(|v| (v, ctx.timings)).map_err(|e| Error::Job { task: t, source: Box::new(e) })
        }).collect()
    } else {
        thread_pool(policy.workers)?.install(|| (0..tasks).into_par_iter().map(run).collect())
    };
    let mut results = Vec::with_capacity(tasks);
    let mut timings = StageTimings::default();
    for outcome in outcomes {
        let (v, t) = outcome?;
        results.push(v);
        timings.extend(t);
    }
    Ok((results, timings))
}

/// Slice mode chosen for `workers`: among modes with `n_k ≥ workers`, the one
/// whose contiguous split is most even; ties go to the highest mode.
pub fn auto_slice_mode(dims: &[usize], workers: usize) -> Result<usize> {
    let w = workers.max(1);
    let imbalance = |n: usize| (n.div_ceil(w) * w) as f64 / n as f64 - 1.0;
    let mut best: Option<(usize, f64)> = None;
    for (k, &n) in dims.iter().enumerate().filter(|(_, &n)| n >= w) {
        let score = imbalance(n);
        if best.is_none_or(|(_, b)| score <= b) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| {
        Error::invalid(format!("no mode of {dims:?} is large enough to split over {workers} workers"))
    })
}

/// Contiguous ranges covering `0..n`, sizes differing by at most one.
pub fn slab_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = (start, start + len);
            start += len;
            r
        })
        .collect()
}

/// Copy of `x` restricted to indices `a..b` of mode `k`.
fn slab(x: &DenseTensor, k: usize, a: usize, b: usize) -> Result<DenseTensor> {
    let n = x.shape().dim(k);
    let left = x.shape().stride(k);
    let right = x.len() / (left * n);
    let mut data = Vec::with_capacity(left * (b - a) * right);
    for r in 0..right {
        data.extend_from_slice(&x.data()[(r * n + a) * left..(r * n + b) * left]);
    }
    DenseTensor::new(x.shape().with_dim(k, b - a)?, data)
}

/// Concatenates slabs along mode `k`.
fn gather(parts: &[DenseTensor], k: usize) -> Result<DenseTensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to gather"))?;
    let total: usize = parts.iter().map(|p| p.shape().dim(k)).sum();
    let shape: Shape = first.shape().with_dim(k, total)?;
    let left = first.shape().stride(k);
    let right = first.len() / (left * first.shape().dim(k));
    let mut data = Vec::with_capacity(shape.len());
    for r in 0..right {
        for p in parts {
            let m = p.shape().dim(k) * left;
            data.extend_from_slice(&p.data()[r * m..(r + 1) * m]);
        }
    }
    DenseTensor::new(shape, data)
}

/// Core `X ×_1 U_1ᵀ ⋯ ×_d U_dᵀ` assembled slab by slab.
///
/// `X` is cut into `workers` contiguous slabs along the slice mode; each worker
/// applies every other mode's projection to its slab, then the coordinator
/// gathers the reduced slabs and applies the slice mode last. The result is
/// bitwise equal to the serial product taken in the same mode order.
pub fn sliced_core(x: &DenseTensor, factors: &[Matrix], policy: &ExecPolicy) -> Result<(DenseTensor, StageTimings)> {
    policy.validate()?;
    let d = x.order();
    if factors.len() != d {
        return Err(Error::invalid(format!("{} factors for an order-{d} tensor", factors.len())));
    }
    for (k, u) in factors.iter().enumerate() {
        if u.nrows() != x.shape().dim(k) {
            return Err(Error::invalid(format!(
                "factor {k} has {} rows, tensor dimension is {}",
                u.nrows(),
                x.shape().dim(k)
            )));
        }
    }
    let kbar = match policy.slice_mode {
        Some(k) => {
            x.shape().check_mode(k)?;
            k
        }
        None => auto_slice_mode(x.dims(), policy.workers)?,
    };
    let n = x.shape().dim(kbar);
    if policy.workers > n {
        return Err(Error::invalid(format!(
            "{} workers exceed the {n} slices of mode {kbar}",
            policy.workers
        )));
    }
    let others: Vec<(usize, MatRef<'_, f64>)> =
        (0..d).filter(|&k| k != kbar).map(|k| (k, factors[k].as_ref())).collect();
    let reduce = |t: &DenseTensor| -> Result<DenseTensor> {
        let mut cur: Option<DenseTensor> = None;
        for &(k, u) in &others {
            cur = Some(ttm_t(cur.as_ref().unwrap_or(t), u, k)?);
        }
        Ok(cur.unwrap_or_else(|| t.clone()))
    };

    let mut timings = StageTimings::default();
    let reduced = if policy.workers == 1 {
        let mut ctx = JobCtx::new(0);
        let r = ctx.time(Stage::Ttm, || reduce(x))?;
        timings.extend(ctx.timings);
        r
    } else {
        let ranges = slab_ranges(n, policy.workers);
        let (parts, t) = parallel_factors(ranges.len(), policy, |i, ctx| {
            let (a, b) = ranges[i];
            let piece = ctx.time(Stage::Ttm, || slab(x, kbar, a, b))?;
            ctx.time(Stage::Ttm, || reduce(&piece))
        })?;
        timings.extend(t);
        let start = Instant::now();
        let g = gather(&parts, kbar)?;
        timings.push(Stage::Gather, 0, start.elapsed().as_secs_f64());
        g
    };
    let start = Instant::now();
    let core = ttm_t(&reduced, factors[kbar].as_ref(), kbar)?;
    timings.push(Stage::SerialTail, 0, start.elapsed().as_secs_f64());
    Ok((core, timings))
}

/// A node of a job graph: the ids it waits for and the work itself. The
/// closure receives its dependencies' results in `deps` order.
pub struct Job<'a, T> {
    pub name: String,
    pub deps: Vec<usize>,
    #[allow(clippy::type_complexity)]
    pub run: Box<dyn Fn(&[&T], &mut JobCtx) -> Result<T> + Send + Sync + 'a>,
}

impl<'a, T> Job<'a, T> {
    pub fn new(
        name: impl Into<String>,
        deps: Vec<usize>,
        run: impl Fn(&[&T], &mut JobCtx) -> Result<T> + Send + Sync + 'a,
    ) -> Self {
        Self { name: name.into(), deps, run: Box::new(run) }
    }
}

#[derive(Debug)]
pub struct Schedule<T> {
    pub results: Vec<T>,
    pub timings: StageTimings,
    /// Job ids in completion order.
    pub completion_order: Vec<usize>,
    /// Largest number of jobs that ran at the same time.
    pub max_in_flight: usize,
}

/// Kahn order over a dependency list; errors on out-of-range ids or cycles.
pub fn topological_order(deps: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = deps.len();
    let mut indegree = vec![0usize; n];
    let mut dependents = vec![Vec::new(); n];
    for (j, ds) in deps.iter().enumerate() {
        for &p in ds {
            if p >= n {
                return Err(Error::invalid(format!("job {j} depends on unknown job {p}")));
            }
            indegree[j] += 1;
            dependents[p].push(j);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(j) = ready.pop_front() {
        order.push(j);
        for &c in &dependents[j] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::invalid("job graph has a dependency cycle"));
    }
    Ok(order)
}

struct SchedState {
    ready: VecDeque<usize>,
    missing: Vec<usize>,
    finished: usize,
    in_flight: usize,
    max_in_flight: usize,
    completion: Vec<usize>,
    timings: StageTimings,
    failure: Option<Error>,
}

/// Runs a dependency graph with up to `policy.workers` jobs at once, starting
/// each job as soon as everything it depends on has finished.
pub fn tree_schedule<T: Send + Sync>(jobs: Vec<Job<'_, T>>, policy: &ExecPolicy) -> Result<Schedule<T>> {
    policy.validate()?;
    let deps: Vec<Vec<usize>> = jobs.iter().map(|j| j.deps.clone()).collect();
    let order = topological_order(&deps)?;
    let n = jobs.len();
    let wrap = |id: usize, e: Error| Error::Job { task: id, source: Box::new(e) };

    if policy.workers == 1 || n <= 1 {
        let cells: Vec<OnceLock<T>> = (0..n).map(|_| OnceLock::new()).collect();
        let mut timings = StageTimings::default();
        for &id in &order {
            let inputs: Vec<&T> = jobs[id].deps.iter().map(|&p| cells[p].get().expect("dependency done")).collect();
            let mut ctx = JobCtx::new(0);
            let out = (jobs[id].run)(&inputs, &mut ctx).map_err(|e| wrap(id, e))?;
            timings.extend(ctx.timings);
            let _ = cells[id].set(out);
        }
        let results = cells.into_iter().map(|c| c.into_inner().expect("all jobs ran")).collect();
        return Ok(Schedule { results, timings, completion_order: order, max_in_flight: usize::from(n > 0) });
    }

    let mut dependents = vec![Vec::new(); n];
    for (j, ds) in deps.iter().enumerate() {
        for &p in ds {
            dependents[p].push(j);
        }
    }
    let cells: Vec<OnceLock<T>> = (0..n).map(|_| OnceLock::new()).collect();
    let state = Mutex::new(SchedState {
        ready: (0..n).filter(|&j| deps[j].is_empty()).collect(),
        missing: deps.iter().map(Vec::len).collect(),
        finished: 0,
        in_flight: 0,
        max_in_flight: 0,
        completion: Vec::with_capacity(n),
        timings: StageTimings::default(),
        failure: None,
    });
    let wake = Condvar::new();

    std::thread::scope(|scope| {
        for worker in 0..policy.workers.min(n) {
            let (jobs, cells, state, wake, dependents) = (&jobs, &cells, &state, &wake, &dependents);
            scope.spawn(move || loop {
                let id = {
                    let mut st = state.lock().expect("scheduler lock");
                    loop {
                        if st.failure.is_some() || st.finished == n {
                            return;
                        }
                        if let Some(id) = st.ready.pop_front() {
                            st.in_flight += 1;
                            st.max_in_flight = st.max_in_flight.max(st.in_flight);
                            break id;
                        }
                        st = wake.wait(st).expect("scheduler lock");
                    }
                };
                let inputs: Vec<&T> = jobs[id].deps.iter().map(|&p| cells[p].get().expect("dependency done")).collect();
                let mut ctx = JobCtx::new(worker);
                let outcome = (jobs[id].run)(&inputs, &mut ctx);
                let mut st = state.lock().expect("scheduler lock");
                st.in_flight -= 1;
                match outcome {
                    Ok(v) => {
                        let _ = cells[id].set(v);
                        st.finished += 1;
                        st.completion.push(id);
                        st.timings.extend(ctx.timings);
                        for &c in &dependents[id] {
                            st.missing[c] -= 1;
                            if st.missing[c] == 0 {
                                st.ready.push_back(c);
                            }
                        }
                    }
                    Err(e) => {
                        if st.failure.is_none() {
                            st.failure = Some(Error::Job { task: id, source: Box::new(e) });
                        }
                    }
                }
                wake.notify_all();
            });
        }
    });

    let st = state.into_inner().expect("scheduler lock");
    if let Some(e) = st.failure {
        return Err(e);
    }
    let results = cells.into_iter().map(|c| c.into_inner().expect("all jobs ran")).collect();
    Ok(Schedule { results, timings: st.timings, completion_order: st.completion, max_in_flight: st.max_in_flight })
}

/// Outcome of a cost-only schedule simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSchedule {
    pub makespan: f64,
    pub max_in_flight: usize,
    pub start_times: Vec<f64>,
}

/// Replays the ready-queue policy of [`tree_schedule`] with fixed job costs
/// instead of real work. Ready jobs start in id order on the first free worker.
pub fn simulate_schedule(costs: &[f64], deps: &[Vec<usize>], workers: usize) -> Result<SimulatedSchedule> {
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    if costs.len() != deps.len() {
        return Err(Error::invalid("one cost per job is required"));
    }
    if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        return Err(Error::invalid(format!("job cost {c} must be finite and non-negative")));
    }
    topological_order(deps)?;
    let n = costs.len();
    let mut missing: Vec<usize> = deps.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&j| missing[j] == 0).collect();
    let mut running: Vec<(f64, usize)> = Vec::new();
    let mut start_times = vec![0.0; n];
    let (mut now, mut done, mut max_in_flight) = (0.0f64, 0usize, 0usize);
    while done < n {
        ready.sort_unstable();
        while running.len() < workers && !ready.is_empty() {
            let j = ready.remove(0);
            start_times[j] = now;
            running.push((now + costs[j], j));
        }
        max_in_flight = max_in_flight.max(running.len());
        let t = running.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        now = t;
        let (finished, still): (Vec<_>, Vec<_>) = running.into_iter().partition(|r| r.0 <= t);
        running = still;
        for (_, j) in finished {
            done += 1;
            for (c, ds) in deps.iter().enumerate() {
                if ds.contains(&j) {
                    missing[c] -= 1;
                    if missing[c] == 0 {
                        ready.push(c);
                    }
                }
            }
        }
    }
    Ok(SimulatedSchedule { makespan: now, max_in_flight, start_times })
}
