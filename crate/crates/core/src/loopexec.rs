//! Executes a parsed [`Schedule`] as a (possibly parallel) loop nest.
//!
//! Instead of generating and compiling source for each spec string, the
//! schedule is lowered once into a [`LoopPlan`] that a recursive walker
//! interprets. Plans are cached by schedule signature, so asking twice for
//! the same nest shape reuses the first plan.
//!
//! Each worker of a team runs `init`, then its share of the nest, then
//! `term`. A schedule with no parallel loop runs entirely on worker 0 (the
//! others only run their hooks). Work-shared loops
//! (one contiguous uppercase run) are collapsed into a single iteration
//! space and split among the team without an implicit barrier afterwards.
//! Grid-annotated loops are split in contiguous blocks by the worker's
//! coordinate on the loop's axis.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex, OnceLock};

use thiserror::Error;

use crate::loopspec::{self, LoopNestDecl, LoopSpecError, ParMode, Schedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoopExecError {
    #[error(transparent)]
    Spec(#[from] LoopSpecError),
    #[error("team size must be at least 1")]
    EmptyTeam,
    #[error("thread grid {r}x{c}x{l} = {} does not match team size {team}", r * c * l)]
    GridMismatch { r: usize, c: usize, l: usize, team: usize },
    #[error("barrier after '{mnemonic}' would not be reached by every worker equally often")]
    BarrierPlacement { mnemonic: char },
}

/// Structural, size-independent lowering of a schedule.
#[derive(Debug)]
pub struct LoopPlan {
    signature: String,
    levels: Vec<PlanLevel>,
    /// Position of the innermost occurrence of each logical loop.
    innermost: Vec<usize>,
    /// `[lo, hi)` positions of the work-shared collapse group.
    collapse: Option<(usize, usize)>,
    par_mode: ParMode,
    grid_dims: (usize, usize, usize),
    directive: Option<loopspec::Directive>,
}

#[derive(Debug, Clone)]
struct PlanLevel {
    loop_idx: usize,
    /// Position of the previous occurrence of the same loop, if any.
    parent: Option<usize>,
    grid_axis: Option<usize>,
    barrier_after: bool,
}

impl LoopPlan {
    fn compile(schedule: &Schedule, n_loops: usize) -> LoopPlan {
        let mut last_pos: Vec<Option<usize>> = vec![None; n_loops];
        let mut levels = Vec::with_capacity(schedule.instances.len());
        for (pos, inst) in schedule.instances.iter().enumerate() {
            levels.push(PlanLevel {
                loop_idx: inst.loop_idx,
                parent: last_pos[inst.loop_idx],
                grid_axis: inst.grid_axis.map(|a| a.index()),
                barrier_after: inst.barrier_after,
            });
            last_pos[inst.loop_idx] = Some(pos);
        }
        let collapse = match schedule.par_mode {
            ParMode::WorkShare => {
                let par = schedule.parallel_positions();
                Some((par[0], par[par.len() - 1] + 1))
            }
            _ => None,
        };
        LoopPlan {
            signature: schedule.canonical_signature(),
            levels,
            innermost: last_pos.into_iter().map(|p| p.expect("every loop occurs")).collect(),
            collapse,
            par_mode: schedule.par_mode,
            grid_dims: schedule.grid_dims,
            directive: schedule.directive,
        }
    }

    pub fn signature(&self) -> &str {
        &self.signature
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

type CacheKey = (String, usize, usize);

/// Plan cache keyed by `(signature, loop count, team size)`.
#[derive(Default)]
pub struct ExecutorCache {
    entries: Mutex<HashMap<CacheKey, Arc<LoopPlan>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ExecutorCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-wide cache used by [`instantiate`].
    pub fn global() -> &'static ExecutorCache {
        static GLOBAL: OnceLock<ExecutorCache> = OnceLock::new();
        GLOBAL.get_or_init(ExecutorCache::new)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instantiate(&self, decl: &LoopNestDecl, spec: &str, team_size: usize) -> Result<LoopNest, LoopExecError> {
        let schedule = loopspec::parse(decl, spec)?;
        self.instantiate_schedule(decl, schedule, team_size)
    }

    pub fn instantiate_schedule(
        &self,
        decl: &LoopNestDecl,
        schedule: Schedule,
        team_size: usize,
    ) -> Result<LoopNest, LoopExecError> {
        if team_size == 0 {
            return Err(LoopExecError::EmptyTeam);
        }
        if schedule.par_mode == ParMode::ExplicitGrid && schedule.grid_size() != team_size {
            let (r, c, l) = schedule.grid_dims;
            return Err(LoopExecError::GridMismatch { r, c, l, team: team_size });
        }
        let key = (schedule.canonical_signature(), decl.len(), team_size);
        let plan = {
            let mut entries = self.entries.lock().unwrap();
            if let Some(plan) = entries.get(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Arc::clone(plan)
            } else {
                self.misses.fetch_add(1, Ordering::Relaxed);
                let plan = Arc::new(LoopPlan::compile(&schedule, decl.len()));
                entries.insert(key, Arc::clone(&plan));
                plan
            }
        };
        let nest = LoopNest { plan, schedule, decl: decl.clone(), team_size };
        nest.check_barriers()?;
        Ok(nest)
    }
}

/// Parses `spec`, consulting the global plan cache.
pub fn instantiate(decl: &LoopNestDecl, spec: &str, team_size: usize) -> Result<LoopNest, LoopExecError> {
    ExecutorCache::global().instantiate(decl, spec, team_size)
}

/// A schedule bound to a declaration and a team size, ready to run.
#[derive(Debug, Clone)]
pub struct LoopNest {
    plan: Arc<LoopPlan>,
    schedule: Schedule,
    decl: LoopNestDecl,
    team_size: usize,
}

/// Per-level loop extents resolved against the declaration.
struct Extents {
    step: Vec<usize>,
    trips: Vec<usize>,
    start: Vec<usize>,
}

/// Shared state for one `execute` call.
struct Team {
    barrier: Barrier,
    /// One claim counter per encounter of the collapse group (dynamic only).
    claims: Vec<AtomicUsize>,
}

impl LoopNest {
    pub fn plan(&self) -> &Arc<LoopPlan> {
        &self.plan
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn decl(&self) -> &LoopNestDecl {
        &self.decl
    }

    pub fn team_size(&self) -> usize {
        self.team_size
    }

    /// Grid coordinate `(row, col, layer)` of worker `w`, row-major over
    /// `(R, C, L)`.
    pub fn grid_coords(&self, w: usize) -> (usize, usize, usize) {
        let (_, c, l) = self.plan.grid_dims;
        (w / (c * l), (w / l) % c, w % l)
    }

    /// Total body invocations across the team.
    pub fn iteration_count(&self) -> usize {
        self.decl.loops().iter().map(|l| l.trip_count()).product()
    }

    fn extents(&self) -> Extents {
        let n = self.plan.levels.len();
        let mut step = Vec::with_capacity(n);
        let mut trips = Vec::with_capacity(n);
        let mut start = Vec::with_capacity(n);
        for (lvl, inst) in self.plan.levels.iter().zip(&self.schedule.instances) {
            let decl = self.decl.get(lvl.loop_idx);
            let s = inst.effective_step;
            step.push(s);
            start.push(decl.start);
            trips.push(match lvl.parent {
                None => (decl.bound - decl.start) / s,
                Some(p) => self.schedule.instances[p].effective_step / s,
            });
        }
        Extents { step, trips, start }
    }

    fn check_barriers(&self) -> Result<(), LoopExecError> {
        let ext = self.extents();
        for (pos, lvl) in self.plan.levels.iter().enumerate() {
            if !lvl.barrier_after {
                continue;
            }
            let bad = || LoopExecError::BarrierPlacement {
                mnemonic: loopspec::mnemonic(lvl.loop_idx),
            };
            match self.plan.par_mode {
                ParMode::Serial => {}
                ParMode::WorkShare => {
                    let (lo, hi) = self.plan.collapse.expect("work-share group");
                    // Legal above the group, or after the whole group.
                    if pos >= lo && pos != hi - 1 {
                        return Err(bad());
                    }
                }
                ParMode::ExplicitGrid => {
                    for outer in 0..pos {
                        if let Some(axis) = self.plan.levels[outer].grid_axis {
                            let dim = [self.plan.grid_dims.0, self.plan.grid_dims.1, self.plan.grid_dims.2][axis];
                            if ext.trips[outer] % dim != 0 {
                                return Err(bad());
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs the nest on the team; `body` receives the logical indices in
    /// declaration order.
    pub fn execute<F>(&self, body: F)
    where
        F: Fn(&[usize]) + Sync,
    {
        self.execute_with(body, None::<fn()>, None::<fn()>);
    }

    /// As [`execute`](Self::execute), with per-worker `init` and `term` hooks.
    pub fn execute_with<F, I, T>(&self, body: F, init: Option<I>, term: Option<T>)
    where
        F: Fn(&[usize]) + Sync,
        I: Fn() + Sync,
        T: Fn() + Sync,
    {
        let ext = self.extents();
        let team = Team {
            barrier: Barrier::new(self.team_size),
            claims: match (self.plan.collapse, self.plan.directive) {
                (Some((lo, _)), Some(d)) if d.kind == ScheduleKind::Dynamic => {
                    let encounters: usize = ext.trips[..lo].iter().product();
                    (0..encounters).map(|_| AtomicUsize::new(0)).collect()
                }
                _ => Vec::new(),
            },
        };
        let run = |worker: usize| {
            if let Some(f) = &init {
                f();
            }
            let mut visit = |ind: &[usize]| body(ind);
            Walker::new(self, &ext, worker, Some(&team), &mut visit).run();
            if let Some(f) = &term {
                f();
            }
        };
        if self.team_size == 1 {
            run(0);
            return;
        }
        std::thread::scope(|s| {
            for w in 1..self.team_size {
                let run = &run;
                s.spawn(move || run(w));
            }
            run(0);
        });
    }

    /// Replays the iterations worker `worker` would execute, in order, on the
    /// calling thread. Barriers are skipped; dynamic chunks are dealt
    /// round-robin, as if every worker claimed at the same pace.
    pub fn worker_iterations(&self, worker: usize, mut visit: impl FnMut(&[usize])) {
        assert!(worker < self.team_size, "worker {worker} outside team of {}", self.team_size);
        let ext = self.extents();
        Walker::new(self, &ext, worker, None, &mut visit).run();
    }
}

struct Walker<'a> {
    plan: &'a LoopPlan,
    ext: &'a Extents,
    worker: usize,
    team_size: usize,
    coords: [usize; 3],
    team: Option<&'a Team>,
    visit: &'a mut dyn FnMut(&[usize]),
    cur: Vec<usize>,
    counters: Vec<usize>,
    ind: Vec<usize>,
    encounter: usize,
}

impl<'a> Walker<'a> {
    fn new(
        nest: &'a LoopNest,
        ext: &'a Extents,
        worker: usize,
        team: Option<&'a Team>,
        visit: &'a mut dyn FnMut(&[usize]),
    ) -> Self {
        let (r, c, l) = nest.grid_coords(worker);
        Walker {
            plan: &nest.plan,
            ext,
            worker,
            team_size: nest.team_size,
            coords: [r, c, l],
            team,
            visit,
            cur: vec![0; nest.plan.levels.len()],
            counters: vec![0; nest.plan.levels.len()],
            ind: vec![0; nest.plan.innermost.len()],
            encounter: 0,
        }
    }

    fn run(&mut self) {
        if self.plan.par_mode == ParMode::Serial && self.worker != 0 {
            return;
        }
        self.walk(0);
    }

    fn barrier(&self) {
        if self.plan.par_mode == ParMode::Serial {
            return;
        }
        if let Some(team) = self.team {
            team.barrier.wait();
        }
    }

    #[inline]
    fn base(&self, pos: usize) -> usize {
        match self.plan.levels[pos].parent {
            Some(p) => self.cur[p],
            None => self.ext.start[pos],
        }
    }

    fn walk(&mut self, pos: usize) {
        if pos == self.plan.levels.len() {
            for (k, &p) in self.plan.innermost.iter().enumerate() {
                self.ind[k] = self.cur[p];
            }
            (self.visit)(&self.ind);
            return;
        }
        if let Some((lo, hi)) = self.plan.collapse {
            if pos == lo {
                self.walk_collapsed(lo, hi);
                if self.plan.levels[hi - 1].barrier_after {
                    self.barrier();
                }
                return;
            }
        }
        let lvl = &self.plan.levels[pos];
        let trips = self.ext.trips[pos];
        let (lo, hi) = match lvl.grid_axis {
            Some(axis) => {
                let dim = [self.plan.grid_dims.0, self.plan.grid_dims.1, self.plan.grid_dims.2][axis];
                block_range(trips, dim, self.coords[axis])
            }
            None => (0, trips),
        };
        let base = self.base(pos);
        let step = self.ext.step[pos];
        for c in lo..hi {
            self.cur[pos] = base + c * step;
            self.walk(pos + 1);
        }
        if lvl.barrier_after {
            self.barrier();
        }
    }

    fn walk_collapsed(&mut self, lo: usize, hi: usize) {
        let total: usize = self.ext.trips[lo..hi].iter().product();
        let encounter = self.encounter;
        self.encounter += 1;
        let t = self.team_size;
        match self.plan.directive {
            None => {
                let chunk = total.div_ceil(t);
                let start = (self.worker * chunk).min(total);
                let end = (start + chunk).min(total);
                for flat in start..end {
                    self.visit_flat(lo, hi, flat);
                }
            }
            Some(d) if d.kind == ScheduleKind::Static || self.team.is_none() => {
                let mut start = self.worker * d.chunk;
                while start < total {
                    for flat in start..(start + d.chunk).min(total) {
                        self.visit_flat(lo, hi, flat);
                    }
                    start += t * d.chunk;
                }
            }
            Some(d) => {
                let counter = &self.team.expect("team").claims[encounter];
                loop {
                    let start = counter.fetch_add(d.chunk, Ordering::Relaxed);
                    if start >= total {
                        break;
                    }
                    for flat in start..(start + d.chunk).min(total) {
                        self.visit_flat(lo, hi, flat);
                    }
                }
            }
        }
    }

    /// Decodes a collapsed linear index (last level fastest) and descends.
    fn visit_flat(&mut self, lo: usize, hi: usize, flat: usize) {
        let mut rem = flat;
        for pos in (lo..hi).rev() {
            let trips = self.ext.trips[pos];
            self.counters[pos] = rem % trips;
            rem /= trips;
        }
        for pos in lo..hi {
            self.cur[pos] = self.base(pos) + self.counters[pos] * self.ext.step[pos];
        }
        self.walk(hi);
    }
}

/// Contiguous block `[lo, hi)` of `trips` owned by `coord` out of `dim`
/// ways; blocks are `ceil(trips / dim)` long, the last one possibly short.
pub fn block_range(trips: usize, dim: usize, coord: usize) -> (usize, usize) {
    let size = trips.div_ceil(dim);
    let lo = (coord * size).min(trips);
    (lo, (lo + size).min(trips))
}
