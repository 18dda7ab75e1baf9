//! Coarse performance model: per-worker traces of whole tensor-block
//! accesses replayed through a simulated LRU cache hierarchy.
//!
//! Each BRGEMM call of a GEMM schedule contributes three accesses: the
//! batch of `A` blocks, the batch of `B` blocks, and the `C` block (which
//! carries the call's flops). A call costs
//! `max(sum(bytes / bandwidth of the level the slice came from), flops / peak)`,
//! i.e. data movement is assumed to overlap with compute. Workers are
//! simulated independently (no sharing, no contention); the predicted time
//! is the slowest worker's.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{format_blocks, GemmProblem, KernelError, LoopConfig};
use crate::loopexec;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid machine model: {0}")]
    Machine(String),
    #[error("machine model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("no traces to simulate")]
    NoTraces,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheLevel {
    /// Bytes.
    pub capacity: u64,
    /// Bytes per cycle.
    pub bw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineModel {
    pub levels: Vec<CacheLevel>,
    /// Bytes per cycle from memory.
    pub mem_bw: f64,
    /// Flops per cycle per worker.
    pub peak: f64,
    pub threads: usize,
}

impl MachineModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Machine(s));
        if self.levels.len() > 3 {
            return bad(format!("{} cache levels (at most 3)", self.levels.len()));
        }
        if self.threads == 0 || self.peak.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || self.mem_bw.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("threads, peak and mem_bw must be positive".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.capacity == 0 {
                return bad(format!("level {} has zero capacity", i + 1));
            }
            if i > 0 && l.capacity <= self.levels[i - 1].capacity {
                return bad("capacities must increase level by level".into());
            }
            if i > 0 && l.bw >= self.levels[i - 1].bw {
                return bad("bandwidths must decrease level by level".into());
            }
        }
        if let Some(last) = self.levels.last() {
            if self.mem_bw >= last.bw {
                return bad("memory bandwidth must be below the last cache level's".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let mm: MachineModel = serde_json::from_str(text)?;
        mm.validate()?;
        Ok(mm)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Rough single-core model of a recent server part: 48 KiB L1, 2 MiB L2,
    /// a large shared L3, and auto-vectorized FP32 micro-kernels.
    pub fn host(threads: usize) -> Self {
        MachineModel {
            levels: vec![
                CacheLevel { capacity: 48 << 10, bw: 128.0 },
                CacheLevel { capacity: 2 << 20, bw: 48.0 },
                CacheLevel { capacity: 32 << 20, bw: 16.0 },
            ],
            mem_bw: 6.0,
            peak: 32.0,
            threads,
        }
    }

    /// Same machine with every cache `factor` times larger.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut m = self.clone();
        for l in &mut m.levels {
            l.capacity *= factor;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    A,
    B,
    C,
}

/// One whole-slice access. `coords` are block coordinates of the slice's
/// first block: `(im, ik)` for `A`, `(in, ik)` for `B`, `(im, in)` for `C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceAccess {
    pub tensor: TensorId,
    pub coords: [usize; 2],
    pub bytes: u64,
    pub flops: u64,
}

type SliceKey = (TensorId, [usize; 2], u64);

impl SliceAccess {
    fn key(&self) -> SliceKey {
        (self.tensor, self.coords, self.bytes)
    }
}

const ELEM_BYTES: u64 = 4;

/// Per-worker slice traces of a GEMM schedule, from the same iteration
/// assignment the executor uses.
pub fn generate_traces(cfg: &LoopConfig, p: &GemmProblem, team_size: usize) -> Result<Vec<Vec<SliceAccess>>, ModelError> {
    let decl = cfg.decl(&p.bounds())?;
    let nest = loopexec::instantiate(&decl, &cfg.spec, team_size).map_err(KernelError::from)?;
    let (k_step, m_step, n_step) = (cfg.step(0), cfg.step(1), cfg.step(2));
    let (bm, bn, bk) = (p.bm as u64, p.bn as u64, p.bk as u64);
    let kk = k_step as u64;
    Ok((0..team_size)
        .map(|w| {
            let mut trace = Vec::new();
            nest.worker_iterations(w, |ind| {
                let (ik, im0, in0) = (ind[0], ind[1], ind[2]);
                for in_ in in0..in0 + n_step {
                    for im in im0..im0 + m_step {
                        trace.push(SliceAccess { tensor: TensorId::A, coords: [im, ik], bytes: bm * bk * kk * ELEM_BYTES, flops: 0 });
                        trace.push(SliceAccess { tensor: TensorId::B, coords: [in_, ik], bytes: bk * bn * kk * ELEM_BYTES, flops: 0 });
                        trace.push(SliceAccess {
                            tensor: TensorId::C,
                            coords: [im, in_],
                            bytes: bm * bn * ELEM_BYTES,
                            flops: 2 * bm * bn * bk * kk,
                        });
                    }
                }
            });
            trace
        })
        .collect())
}

/// One LRU cache level.
#[derive(Debug, Default, Clone)]
struct Level {
    capacity: u64,
    used: u64,
    entries: HashMap<SliceKey, u64>,
    order: BTreeMap<u64, (SliceKey, u64)>,
}

impl Level {
    fn new(capacity: u64) -> Self {
        Level { capacity, ..Default::default() }
    }

    fn contains(&self, key: &SliceKey) -> bool {
        self.entries.contains_key(key)
    }

    fn remove(&mut self, key: &SliceKey) {
        if let Some(stamp) = self.entries.remove(key) {
            let (_, bytes) = self.order.remove(&stamp).expect("consistent LRU index");
            self.used -= bytes;
        }
    }

    /// Marks `key` most recently used, inserting it if needed; returns the
    /// evicted keys. Slices larger than the level bypass it.
    fn touch(&mut self, key: SliceKey, bytes: u64, stamp: u64) -> Vec<SliceKey> {
        let mut evicted = Vec::new();
        if bytes > self.capacity {
            return evicted;
        }
        if let Some(old) = self.entries.insert(key, stamp) {
            let v = self.order.remove(&old).expect("consistent LRU index");
            self.order.insert(stamp, v);
            return evicted;
        }
        self.order.insert(stamp, (key, bytes));
        self.used += bytes;
        while self.used > self.capacity {
            let (&s, _) = self.order.iter().next().expect("over capacity implies entries");
            let (k, b) = self.order.remove(&s).unwrap();
            self.entries.remove(&k);
            self.used -= b;
            evicted.push(k);
        }
        evicted
    }
}

/// Inclusive multi-level LRU hierarchy.
#[derive(Debug, Clone)]
pub struct CacheState {
    levels: Vec<Level>,
    stamp: u64,
    evictions: u64,
}

impl CacheState {
    pub fn new(mm: &MachineModel) -> Self {
        CacheState { levels: mm.levels.iter().map(|l| Level::new(l.capacity)).collect(), stamp: 0, evictions: 0 }
    }

    /// Innermost level holding the slice, `None` for memory.
    pub fn locate(&self, a: &SliceAccess) -> Option<usize> {
        let key = a.key();
        self.levels.iter().position(|l| l.contains(&key))
    }

    /// Brings the slice into every level, evicting LRU slices as needed.
    /// A slice evicted from a level is also dropped from the levels above it.
    pub fn access(&mut self, a: &SliceAccess) -> Option<usize> {
        let found = self.locate(a);
        self.stamp += 1;
        let key = a.key();
        for i in (0..self.levels.len()).rev() {
            let evicted = self.levels[i].touch(key, a.bytes, self.stamp);
            self.evictions += evicted.len() as u64;
            for k in evicted {
                for upper in &mut self.levels[..i] {
                    upper.remove(&k);
                }
            }
        }
        found
    }

    pub fn occupancy(&self) -> Vec<u64> {
        self.levels.iter().map(|l| l.used).collect()
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerStats {
    pub cycles: f64,
    pub flops: u64,
    pub evictions: u64,
}

/// Replays one worker's trace from a cold hierarchy.
pub fn simulate_worker(trace: &[SliceAccess], mm: &MachineModel) -> WorkerStats {
    let mut cache = CacheState::new(mm);
    let (cycles, flops) = replay(trace, mm, &mut cache);
    WorkerStats { cycles, flops, evictions: cache.evictions() }
}

/// Replays a trace against an existing cache state; returns (cycles, flops).
pub fn replay(trace: &[SliceAccess], mm: &MachineModel, cache: &mut CacheState) -> (f64, u64) {
    let mut cycles = 0.0;
    let mut flops = 0;
    let mut transfer = 0.0;
    for a in trace {
        let bw = match cache.access(a) {
            Some(l) => mm.levels[l].bw,
            None => mm.mem_bw,
        };
        transfer += a.bytes as f64 / bw;
        if a.flops > 0 {
            cycles += transfer.max(a.flops as f64 / mm.peak);
            flops += a.flops;
            transfer = 0.0;
        }
    }
    (cycles + transfer, flops)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedScore {
    /// Slowest worker's cycles.
    pub cycles: f64,
    pub flops: u64,
    /// Flops per predicted cycle.
    pub score: f64,
    pub workers: Vec<WorkerStats>,
}

pub fn simulate(traces: &[Vec<SliceAccess>], mm: &MachineModel) -> Result<PredictedScore, ModelError> {
    if traces.is_empty() {
        return Err(ModelError::NoTraces);
    }
    let workers: Vec<WorkerStats> = traces.iter().map(|t| simulate_worker(t, mm)).collect();
    let cycles = workers.iter().map(|w| w.cycles).fold(0.0, f64::max);
    let flops = workers.iter().map(|w| w.flops).sum();
    let score = if cycles > 0.0 { flops as f64 / cycles } else { 0.0 };
    Ok(PredictedScore { cycles, flops, score, workers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub spec: String,
    pub blocks: String,
    pub score: f64,
    pub cycles: f64,
    pub error: Option<String>,
}

/// Scores every configuration with `mm.threads` workers; best first, ties
/// broken by spec string. Failing configurations sort last with score 0.
pub fn rank_schedules(p: &GemmProblem, cfgs: &[LoopConfig], mm: &MachineModel) -> Vec<RankEntry> {
    let mut out: Vec<RankEntry> = cfgs
        .iter()
        .map(|cfg| {
            let blocks = format_blocks(&cfg.chains);
            match generate_traces(cfg, p, mm.threads).and_then(|t| simulate(&t, mm)) {
                Ok(s) => RankEntry { spec: cfg.spec.clone(), blocks, score: s.score, cycles: s.cycles, error: None },
                Err(e) => RankEntry { spec: cfg.spec.clone(), blocks, score: 0.0, cycles: f64::NAN, error: Some(e.to_string()) },
            }
        })
        .collect();
    out.sort_by(|x, y| {
        x.error
            .is_some()
            .cmp(&y.error.is_some())
            .then(y.score.total_cmp(&x.score))
            .then_with(|| x.spec.cmp(&y.spec))
            .then_with(|| x.blocks.cmp(&y.blocks))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub spec: String,
    pub score: f64,
    pub predicted_cycles: f64,
}

pub fn write_rank_csv<W: io::Write>(out: W, ranks: &[RankEntry]) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_writer(out);
    for r in ranks {
        w.serialize(RankRow { spec: r.spec.clone(), score: r.score, predicted_cycles: r.cycles })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rank_csv<R: io::Read>(input: R) -> Result<Vec<RankRow>, ModelError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_level(capacity: u64) -> MachineModel {
        MachineModel { levels: vec![CacheLevel { capacity, bw: 64.0 }], mem_bw: 8.0, peak: 16.0, threads: 1 }
    }

    fn acc(t: TensorId, i: usize, bytes: u64) -> SliceAccess {
        SliceAccess { tensor: t, coords: [i, 0], bytes, flops: 0 }
    }

    #[test]
    fn machine_validation() {
        assert!(MachineModel::host(4).validate().is_ok());
        let mut m = MachineModel::host(1);
        m.levels[1].capacity = 1;
        assert!(m.validate().is_err());
        let mut m = MachineModel::host(1);
        m.levels[2].bw = 100.0;
        assert!(m.validate().is_err());
        let mut m = MachineModel::host(1);
        m.mem_bw = 20.0;
        assert!(m.validate().is_err());
        let json = r#"{"levels":[{"capacity":1024,"bw":32.0}],"mem_bw":4.0,"peak":8.0,"threads":2}"#;
        let m = MachineModel::from_json(json).unwrap();
        assert_eq!(m.threads, 2);
        assert_eq!(MachineModel::from_json(&m.to_json()).unwrap(), m);
        assert!(MachineModel::from_json("{").is_err());
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mm = one_level(300);
        let mut c = CacheState::new(&mm);
        for i in 0..3 {
            c.access(&acc(TensorId::A, i, 100));
        }
        c.access(&acc(TensorId::A, 0, 100)); // 0 becomes most recent
        c.access(&acc(TensorId::A, 3, 100)); // evicts 1
        assert_eq!(c.evictions(), 1);
        assert_eq!(c.locate(&acc(TensorId::A, 1, 100)), None);
        assert_eq!(c.locate(&acc(TensorId::A, 0, 100)), Some(0));
        assert_eq!(c.occupancy(), vec![300]);
    }

    #[test]
    fn oversized_slices_bypass() {
        let mm = one_level(100);
        let mut c = CacheState::new(&mm);
        c.access(&acc(TensorId::B, 0, 50));
        c.access(&acc(TensorId::B, 1, 500));
        assert_eq!(c.locate(&acc(TensorId::B, 0, 50)), Some(0));
        assert_eq!(c.locate(&acc(TensorId::B, 1, 500)), None);
    }

    #[test]
    fn inclusive_back_invalidation() {
        let mm = MachineModel {
            levels: vec![CacheLevel { capacity: 200, bw: 64.0 }, CacheLevel { capacity: 300, bw: 32.0 }],
            mem_bw: 8.0,
            peak: 16.0,
            threads: 1,
        };
        let mut c = CacheState::new(&mm);
        c.access(&acc(TensorId::A, 0, 100));
        c.access(&acc(TensorId::A, 1, 100));
        c.access(&acc(TensorId::A, 0, 100)); // 0 hot in L1 and L2
        c.access(&acc(TensorId::A, 2, 100));
        c.access(&acc(TensorId::A, 3, 100)); // L2 evicts 1 (LRU there too)
        assert_eq!(c.locate(&acc(TensorId::A, 1, 100)), None);
        for l in &c.levels[..1] {
            assert!(l.entries.keys().all(|k| c.levels[1].contains(k)));
        }
    }

    #[test]
    fn open_transfer_without_flops_is_charged() {
        let mm = one_level(1000);
        let trace = [acc(TensorId::A, 0, 80)];
        assert_eq!(simulate_worker(&trace, &mm).cycles, 10.0);
    }
}
