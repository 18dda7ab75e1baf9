//! Schedule search: enumerate spec strings under blocking / parallelization
//! constraints, time each one, rank by rate.

use std::io;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{format_blocks, LoopConfig};
use crate::loopspec::{self, LoopNestDecl, LoopSpec, LoopSpecError};
use crate::workload::Workload;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuning configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spec(#[from] LoopSpecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Prime factors of `n` in non-decreasing order.
pub fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Proper prefix products `p0, p0*p1, ...` of the prime factorization of
/// `n`, excluding `n` itself (a block step equal to the full range adds a
/// single-trip loop and nothing else).
pub fn prefix_products(n: usize) -> Vec<usize> {
    let f = prime_factors(n);
    let mut out = Vec::new();
    let mut acc = 1;
    for &p in f.iter().take(f.len().saturating_sub(1)) {
        acc *= p;
        out.push(acc);
    }
    out
}

/// All block-step chains (outermost first, strictly decreasing) of length
/// below `max_levels`, drawn from `base_step` times the prefix products of
/// `trip_count`. Ordered by length, then element-wise ascending.
pub fn blocking_candidates(trip_count: usize, base_step: usize, max_levels: usize) -> Vec<Vec<usize>> {
    assert!(trip_count >= 1, "trip count must be positive");
    let steps: Vec<usize> = prefix_products(trip_count).into_iter().map(|p| p * base_step).collect();
    let mut out = vec![Vec::new()];
    let max_len = max_levels.saturating_sub(1);
    // Any strictly decreasing selection of prefix products is a divisor chain.
    let mut level: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for chain in &level {
            for &s in steps.iter().rev() {
                if chain.last().is_none_or(|&l| s < l) {
                    let mut c = chain.clone();
                    c.push(s);
                    next.push(c);
                }
            }
        }
        next.sort();
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuneConfig {
    /// Maximum occurrences per loop (1 = no blocking).
    pub max_levels: Vec<usize>,
    /// Loop indices that may be parallelized.
    pub parallelizable: Vec<usize>,
    pub max_candidates: usize,
    pub reps: usize,
    pub warmups: usize,
    pub threads: usize,
    pub seed: u64,
    /// Thread grid `(R, C)`; when set, explicit-grid candidates are added.
    pub grid: Option<(usize, usize)>,
}

impl TuneConfig {
    pub fn new(max_levels: Vec<usize>, parallelizable: Vec<usize>) -> Self {
        TuneConfig {
            max_levels,
            parallelizable,
            max_candidates: 200,
            reps: 5,
            warmups: 2,
            threads: 1,
            seed: 0,
            grid: None,
        }
    }

    /// Three-loop contraction template: `a` blocked up to twice, `b` and
    /// `c` up to three times, `b`/`c` parallelizable.
    pub fn gemm_template() -> Self {
        Self::new(vec![2, 3, 3], vec![1, 2])
    }

    fn validate(&self, nloops: usize) -> Result<(), TuneError> {
        if self.max_levels.len() != nloops {
            return Err(TuneError::Config(format!("{} level caps for {nloops} loops", self.max_levels.len())));
        }
        if self.max_levels.contains(&0) || self.max_candidates == 0 || self.reps == 0 || self.threads == 0 {
            return Err(TuneError::Config("caps, reps and threads must be positive".into()));
        }
        if let Some(&p) = self.parallelizable.iter().find(|&&p| p >= nloops) {
            return Err(TuneError::Config(format!("parallelizable loop {p} out of range")));
        }
        if let Some((r, c)) = self.grid {
            if r * c != self.threads {
                return Err(TuneError::Config(format!("grid {r}x{c} does not match {} threads", self.threads)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub spec: String,
    /// Per-loop step chains, outermost first, base step last.
    pub chains: Vec<Vec<usize>>,
}

impl Candidate {
    pub fn config(&self) -> LoopConfig {
        LoopConfig::with_chains(self.spec.clone(), self.chains.clone())
    }

    pub fn decl(&self, decl: &LoopNestDecl) -> LoopNestDecl {
        let loops = decl
            .loops()
            .iter()
            .zip(&self.chains)
            .map(|(l, c)| LoopSpec::blocked(l.start, l.bound, *c.last().unwrap(), c[..c.len() - 1].to_vec()))
            .collect();
        LoopNestDecl::new(loops).expect("candidate chains come from a valid declaration")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumeration {
    pub candidates: Vec<Candidate>,
    /// Number of candidates before truncation.
    pub total: usize,
    /// The cap was hit and `candidates` is a seeded sample of the full list.
    pub truncated: bool,
}

/// Enumerates candidate schedules for `decl` (its block steps are ignored;
/// its base steps are kept).
///
/// For every combination of per-loop blocking chains, every distinct
/// ordering of the resulting letters is produced with either one uppercase
/// occurrence of a parallelizable loop, or two adjacent uppercase
/// occurrences of distinct parallelizable loops (a collapse pair). With a
/// grid configured, grid-annotated variants follow. If nothing is
/// parallelizable the orderings are emitted serial.
///
/// The list is unique by construction. Past `max_candidates` a uniform
/// seeded sample is kept, in enumeration order.
pub fn enumerate_specs(decl: &LoopNestDecl, cfg: &TuneConfig) -> Result<Enumeration, TuneError> {
    cfg.validate(decl.len())?;
    let per_loop: Vec<Vec<Vec<usize>>> = decl
        .loops()
        .iter()
        .zip(&cfg.max_levels)
        .map(|(l, &lv)| {
            blocking_candidates(l.trip_count(), l.step, lv)
                .into_iter()
                .map(|mut c| {
                    c.push(l.step);
                    c
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cap = cfg.max_candidates;
    let mut kept: Vec<(usize, Candidate)> = Vec::new();
    let mut total = 0usize;
    let mut emit = |spec: String, chains: &[Vec<usize>]| {
        let i = total;
        total += 1;
        let slot = if i < cap {
            kept.push((i, Candidate { spec: String::new(), chains: Vec::new() }));
            Some(i)
        } else {
            let j = rng.gen_range(0..=i);
            (j < cap).then_some(j)
        };
        if let Some(j) = slot {
            kept[j] = (i, Candidate { spec, chains: chains.to_vec() });
        }
    };

    let mut choice = vec![0usize; per_loop.len()];
    loop {
        let chains: Vec<Vec<usize>> = choice.iter().zip(&per_loop).map(|(&c, opts)| opts[c].clone()).collect();
        let mut letters: Vec<u8> = Vec::new();
        for (i, c) in chains.iter().enumerate() {
            letters.extend(std::iter::repeat_n(b'a' + i as u8, c.len()));
        }
        letters.sort_unstable();
        loop {
            for spec in capitalizations(&letters, cfg) {
                emit(spec, &chains);
            }
            if !next_permutation(&mut letters) {
                break;
            }
        }
        // advance the mixed-radix chain choice, last loop fastest
        let mut d = per_loop.len();
        let done = loop {
            if d == 0 {
                break true;
            }
            d -= 1;
            choice[d] += 1;
            if choice[d] < per_loop[d].len() {
                break false;
            }
            choice[d] = 0;
        };
        if done {
            break;
        }
    }

    kept.sort_by_key(|(i, _)| *i);
    let candidates: Vec<Candidate> = kept
        .into_iter()
        .map(|(_, c)| c)
        .filter(|c| loopspec::parse(&c.decl(decl), &c.spec).is_ok())
        .collect();
    Ok(Enumeration { truncated: total > cap, total, candidates })
}

fn capitalizations(letters: &[u8], cfg: &TuneConfig) -> Vec<String> {
    let par = |ch: u8| cfg.parallelizable.contains(&((ch - b'a') as usize));
    let render = |upper: &[usize], note: &[(usize, String)]| {
        let mut s = String::new();
        for (p, &ch) in letters.iter().enumerate() {
            let c = ch as char;
            s.push(if upper.contains(&p) { c.to_ascii_uppercase() } else { c });
            if let Some((_, n)) = note.iter().find(|(q, _)| *q == p) {
                s.push_str(n);
            }
        }
        s
    };
    let mut out = Vec::new();
    if cfg.parallelizable.is_empty() {
        out.push(render(&[], &[]));
        return out;
    }
    for p in 0..letters.len() {
        if par(letters[p]) {
            out.push(render(&[p], &[]));
        }
    }
    for p in 0..letters.len().saturating_sub(1) {
        if par(letters[p]) && par(letters[p + 1]) && letters[p] != letters[p + 1] {
            out.push(render(&[p, p + 1], &[]));
        }
    }
    if let Some((r, c)) = cfg.grid {
        for p in 0..letters.len() {
            if !par(letters[p]) {
                continue;
            }
            if c == 1 {
                out.push(render(&[p], &[(p, format!("{{R:{r}}}"))]));
                continue;
            }
            for q in 0..letters.len() {
                if q != p && par(letters[q]) && letters[q] != letters[p] {
                    out.push(render(&[p, q], &[(p, format!("{{R:{r}}}")), (q, format!("{{C:{c}}}"))]));
                }
            }
        }
    }
    out
}

/// Lexicographic next permutation; `false` once the last one was reached.
fn next_permutation(v: &mut [u8]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub spec: String,
    pub chains: Vec<Vec<usize>>,
    pub median_ms: f64,
    pub gflops: f64,
    pub valid: bool,
    pub error: Option<String>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub results: Vec<TuneResult>,
    pub total_candidates: usize,
    pub truncated: bool,
}

impl TuneReport {
    pub fn best(&self) -> Option<&TuneResult> {
        self.results.first().filter(|r| r.error.is_none())
    }
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times `cfg.warmups + cfg.reps` runs of one configuration; returns the
/// median time in milliseconds and whether the output passed validation.
pub fn measure(w: &mut dyn Workload, lc: &LoopConfig, warmups: usize, reps: usize, threads: usize) -> Result<(f64, bool), String> {
    for _ in 0..warmups {
        w.run(lc, threads).map_err(|e| e.to_string())?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        w.run(lc, threads).map_err(|e| e.to_string())?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let valid = w.check().is_ok();
    Ok((median(&mut times), valid))
}

/// Benchmarks every enumerated candidate on `w`. Failing candidates are
/// kept in the report (rate 0, `error` set) rather than aborting the run.
pub fn tune(w: &mut dyn Workload, cfg: &TuneConfig) -> Result<TuneReport, TuneError> {
    let en = enumerate_specs(&w.decl(), cfg)?;
    tune_candidates(w, &en.candidates, cfg, en.total, en.truncated)
}

pub fn tune_candidates(
    w: &mut dyn Workload,
    candidates: &[Candidate],
    cfg: &TuneConfig,
    total: usize,
    truncated: bool,
) -> Result<TuneReport, TuneError> {
    let flops = w.flops();
    let mut results: Vec<TuneResult> = candidates
        .iter()
        .map(|cand| {
            let (median_ms, gflops, valid, error) =
                match measure(w, &cand.config(), cfg.warmups, cfg.reps, cfg.threads) {
                    Ok((ms, valid)) => (ms, flops / (ms * 1e6), valid, None),
                    Err(e) => (f64::NAN, 0.0, false, Some(e)),
                };
            TuneResult { spec: cand.spec.clone(), chains: cand.chains.clone(), median_ms, gflops, valid, error, rank: 0 }
        })
        .collect();
    results.sort_by(|x, y| {
        x.error
            .is_some()
            .cmp(&y.error.is_some())
            .then(y.gflops.total_cmp(&x.gflops))
            .then_with(|| x.spec.cmp(&y.spec))
    });
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(TuneReport { results, total_candidates: total, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub spec: String,
    pub blocks: String,
    pub median_ms: f64,
    pub gflops: f64,
    pub valid: bool,
}

impl From<&TuneResult> for TuneRow {
    fn from(r: &TuneResult) -> Self {
        TuneRow { spec: r.spec.clone(), blocks: format_blocks(&r.chains), median_ms: r.median_ms, gflops: r.gflops, valid: r.valid }
    }
}

pub fn write_csv<W: io::Write>(out: W, results: &[TuneResult]) -> Result<(), TuneError> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(TuneRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<TuneRow>, TuneError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}
