//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autotune::{self, Candidate, TuneConfig, TuneError};
use crate::bf16::Bf16;
use crate::kernels::{
    parse_blocks, ConvProblem, GemmProblem, KernelError, LoopConfig, MlpProblem,
};
use crate::mtx::{self, CooMatrix, MtxError};
use crate::perfmodel::{self, MachineModel, ModelError};
use crate::tensor::Element;
use crate::workload::{ConvWorkload, DataKind, GemmWorkload, MlpWorkload, SpmmWorkload, Workload};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mtx(#[from] MtxError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Parser)]
#[command(name = "loopnest", version, about = "Runtime-scheduled loop nests over BRGEMM micro-kernels")]
pub struct Cli {
    /// Worker team size.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Seed for operand generation and candidate sampling.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Write results as CSV to this path.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
    /// Validate outputs against a reference implementation.
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one kernel under one schedule and report its rate.
    Bench(BenchCmd),
    /// Enumerate and benchmark candidate schedules.
    Tune(TuneCmd),
    /// Rank GEMM schedules with the cache model.
    Model(ModelCmd),
    /// Write a random block-sparse matrix in Matrix Market format.
    GenSparse(GenSparseArgs),
}

#[derive(Debug, Args)]
pub struct RunOpts {
    /// Loop specification string (default: all loops serial, declaration order).
    #[arg(long, global = true)]
    pub spec: Option<String>,
    /// Step chains per loop, e.g. "2;4,1;1" (derived from the spec if omitted).
    #[arg(long, global = true)]
    pub blocks: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::Fp32)]
    pub precision: Precision,
    /// Uniform real operands instead of small integers.
    #[arg(long, global = true)]
    pub real: bool,
    #[arg(long, global = true, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, global = true, default_value_t = 2)]
    pub warmups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Fp32,
    Bf16,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    #[command(flatten)]
    pub run: RunOpts,
    #[command(subcommand)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Args)]
pub struct TuneCmd {
    #[command(flatten)]
    pub run: RunOpts,
    #[arg(long, global = true, default_value_t = 50)]
    pub max_candidates: usize,
    /// Maximum occurrences per loop, e.g. "2,3,3".
    #[arg(long, global = true)]
    pub max_levels: Option<String>,
    /// Thread grid "RxC" for explicit-grid candidates.
    #[arg(long, global = true)]
    pub grid: Option<String>,
    #[command(subcommand)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Args)]
pub struct ModelCmd {
    #[command(flatten)]
    pub run: RunOpts,
    /// Machine description (JSON); a generic host model if omitted.
    #[arg(long, global = true)]
    pub machine: Option<PathBuf>,
    /// Candidate list: one spec per line, optionally followed by a tab and
    /// its step chains. Enumerated automatically if omitted.
    #[arg(long, global = true)]
    pub specs: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 50)]
    pub max_candidates: usize,
    /// Also time every candidate and report measured and modeled ranks.
    #[arg(long, global = true)]
    pub compare: bool,
    #[command(subcommand)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Subcommand)]
pub enum KernelArgs {
    Gemm(GemmArgs),
    Mlp(MlpArgs),
    Conv(ConvArgs),
    Spmm(SpmmArgs),
}

#[derive(Debug, Args)]
pub struct GemmArgs {
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub bm: usize,
    #[arg(long, default_value_t = 32)]
    pub bn: usize,
    #[arg(long, default_value_t = 32)]
    pub bk: usize,
}

#[derive(Debug, Args)]
pub struct MlpArgs {
    /// Layer widths, input first, e.g. "256,256,256,256".
    #[arg(long, default_value = "256,256,256,256")]
    pub dims: String,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub bm: usize,
    #[arg(long, default_value_t = 32)]
    pub bn: usize,
    #[arg(long, default_value = "relu")]
    pub act: String,
    #[arg(long)]
    pub bias: bool,
}

#[derive(Debug, Args)]
pub struct ConvArgs {
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub c: usize,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub h: usize,
    #[arg(long, default_value_t = 16)]
    pub w: usize,
    #[arg(long, default_value_t = 3)]
    pub r: usize,
    #[arg(long, default_value_t = 3)]
    pub s: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 32)]
    pub bc: usize,
    #[arg(long, default_value_t = 32)]
    pub bk: usize,
}

#[derive(Debug, Args)]
pub struct SpmmArgs {
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub k: usize,
    /// Sparse block shape "BMxBK".
    #[arg(long, default_value = "32x32")]
    pub block: String,
    #[arg(long, default_value_t = 32)]
    pub bn: usize,
    /// Fraction of zero blocks.
    #[arg(long, default_value_t = 0.9)]
    pub sparsity: f64,
    /// VNNI packing factor of B and C.
    #[arg(long, default_value_t = 1)]
    pub v: usize,
    /// Take A from a Matrix Market file instead of generating it.
    #[arg(long)]
    pub mtx: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSparseArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value = "32x32")]
    pub block: String,
    /// Fraction of blocks kept.
    #[arg(long)]
    pub density: f64,
    #[arg(long)]
    pub real: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pair(s: &str, what: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("{what} must look like 32x32, got '{s}'"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Config(format!("bad {what} entry '{x}' in '{s}'"))))
        .collect()
}

impl KernelArgs {
    fn name(&self) -> &'static str {
        match self {
            KernelArgs::Gemm(_) => "gemm",
            KernelArgs::Mlp(_) => "mlp",
            KernelArgs::Conv(_) => "conv",
            KernelArgs::Spmm(_) => "spmm",
        }
    }

    fn gemm_problem(&self) -> Result<GemmProblem, CliError> {
        match self {
            KernelArgs::Gemm(g) => Ok(GemmProblem::new(g.m, g.n, g.k, g.bm, g.bn, g.bk).map_err(KernelError::from)?),
            other => Err(CliError::Config(format!("the cache model covers gemm only, not {}", other.name()))),
        }
    }

    fn default_spec(&self) -> &'static str {
        match self {
            KernelArgs::Conv(_) => "abcdefg",
            _ => "abc",
        }
    }

    /// Default tuning constraints: contraction loops follow the GEMM
    /// template; convolution keeps every loop unblocked.
    fn tune_template(&self) -> TuneConfig {
        match self {
            KernelArgs::Conv(_) => TuneConfig::new(vec![1; 7], vec![0, 2, 3]),
            _ => TuneConfig::gemm_template(),
        }
    }

    fn workload(&self, prec: Precision, kind: DataKind, seed: u64) -> Result<Box<dyn Workload>, CliError> {
        match prec {
            Precision::Fp32 => self.workload_typed::<f32>(kind, seed),
            Precision::Bf16 => self.workload_typed::<Bf16>(kind, seed),
        }
    }

    fn workload_typed<T: Element>(&self, kind: DataKind, seed: u64) -> Result<Box<dyn Workload>, CliError> {
        Ok(match self {
            KernelArgs::Gemm(_) => Box::new(GemmWorkload::<T>::new(self.gemm_problem()?, seed, kind)),
            KernelArgs::Mlp(a) => {
                let p = MlpProblem {
                    dims: parse_list(&a.dims, "dims")?,
                    batch: a.batch,
                    bm: a.bm,
                    bn: a.bn,
                    activation: a.act.parse()?,
                    bias: a.bias,
                };
                Box::new(MlpWorkload::<T>::new(p, seed, kind)?)
            }
            KernelArgs::Conv(a) => {
                let p = ConvProblem {
                    n: a.n,
                    c: a.c,
                    k: a.k,
                    h: a.h,
                    w: a.w,
                    r: a.r,
                    s: a.s,
                    str_h: a.stride,
                    str_w: a.stride,
                    bc: a.bc,
                    bk: a.bk,
                };
                Box::new(ConvWorkload::<T>::new(p, seed, kind)?)
            }
            KernelArgs::Spmm(a) => {
                let (bm, bk) = parse_pair(&a.block, "--block")?;
                match &a.mtx {
                    Some(path) => {
                        let sparse = mtx::mtx_import(path, bm, bk)?;
                        let p = GemmProblem::new(sparse.m, a.n, sparse.k, bm, a.bn, bk).map_err(KernelError::from)?;
                        let typed = crate::microkernels::BcscMatrix {
                            m: sparse.m,
                            k: sparse.k,
                            bm,
                            bk,
                            ptr: sparse.ptr,
                            blk_idx: sparse.blk_idx,
                            values: sparse.values.into_iter().map(T::from_f32).collect(),
                        };
                        Box::new(SpmmWorkload::<T>::with_matrix(p, typed, a.v, seed, kind)?)
                    }
                    None => {
                        let p = GemmProblem::new(a.m, a.n, a.k, bm, a.bn, bk).map_err(KernelError::from)?;
                        Box::new(SpmmWorkload::<T>::new(p, a.sparsity, a.v, seed, kind)?)
                    }
                }
            }
        })
    }
}

impl RunOpts {
    fn kind(&self) -> DataKind {
        if self.real {
            DataKind::Real
        } else {
            DataKind::Integers
        }
    }

    fn loop_config(&self, kernel: &KernelArgs, bounds: &[usize]) -> Result<LoopConfig, CliError> {
        let spec = self.spec.clone().unwrap_or_else(|| kernel.default_spec().to_string());
        Ok(match &self.blocks {
            Some(b) => LoopConfig::with_chains(spec, parse_blocks(b)?),
            None => LoopConfig::auto(spec, bounds),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: String,
    pub spec: String,
    pub blocks: String,
    pub threads: usize,
    pub median_ms: f64,
    pub gflops: f64,
    pub valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub spec: String,
    pub blocks: String,
    pub measured_rank: usize,
    pub modeled_rank: usize,
    pub median_ms: f64,
    pub gflops: f64,
    pub score: f64,
}

/// Parses `args` (program name first) and runs the command, writing human
/// readable output to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Bench(cmd) => bench(&cli, cmd, out),
        Command::Tune(cmd) => tune(&cli, cmd, out),
        Command::Model(cmd) => model(&cli, cmd, out),
        Command::GenSparse(a) => gen_sparse(&cli, a, out),
    }
}

fn bench(cli: &Cli, cmd: &BenchCmd, out: &mut dyn Write) -> Result<(), CliError> {
    let mut w = cmd.kernel.workload(cmd.run.precision, cmd.run.kind(), cli.seed)?;
    let cfg = cmd.run.loop_config(&cmd.kernel, &w.bounds())?;
    let (ms, _) = autotune::measure(w.as_mut(), &cfg, cmd.run.warmups, cmd.run.reps, cli.threads)
        .map_err(CliError::Config)?;
    let gflops = w.flops() / (ms * 1e6);
    writeln!(out, "{} spec={} blocks={} threads={}: {ms:.3} ms, {gflops:.2} GFLOPS", w.kernel(), cfg.spec, cfg.blocks_string(), cli.threads)?;
    let valid = if cli.check {
        let r = w.check();
        writeln!(out, "validation: {}", if r.is_ok() { "PASS" } else { "FAIL" })?;
        Some(r)
    } else {
        None
    };
    if let Some(path) = &cli.csv {
        let mut wr = csv::Writer::from_writer(File::create(path)?);
        wr.serialize(BenchRow {
            kernel: w.kernel().into(),
            spec: cfg.spec.clone(),
            blocks: cfg.blocks_string(),
            threads: cli.threads,
            median_ms: ms,
            gflops,
            valid: valid.as_ref().map(|r| r.is_ok()),
        })?;
        wr.flush()?;
    }
    match valid {
        Some(Err(e)) => Err(CliError::Validation(e)),
        _ => Ok(()),
    }
}

fn tune_config(cli: &Cli, cmd_levels: &Option<String>, grid: &Option<String>, kernel: &KernelArgs, run: &RunOpts, cap: usize) -> Result<TuneConfig, CliError> {
    let mut cfg = kernel.tune_template();
    if let Some(l) = cmd_levels {
        cfg.max_levels = parse_list(l, "max-levels")?;
    }
    if let Some(g) = grid {
        cfg.grid = Some(parse_pair(g, "--grid")?);
    }
    cfg.max_candidates = cap;
    cfg.reps = run.reps;
    cfg.warmups = run.warmups;
    cfg.threads = cli.threads;
    cfg.seed = cli.seed;
    Ok(cfg)
}

fn tune(cli: &Cli, cmd: &TuneCmd, out: &mut dyn Write) -> Result<(), CliError> {
    let mut w = cmd.kernel.workload(cmd.run.precision, cmd.run.kind(), cli.seed)?;
    let cfg = tune_config(cli, &cmd.max_levels, &cmd.grid, &cmd.kernel, &cmd.run, cmd.max_candidates)?;
    let report = autotune::tune(w.as_mut(), &cfg)?;
    if report.truncated {
        writeln!(out, "warning: {} candidates, sampled {}", report.total_candidates, report.results.len())?;
    }
    match &cli.csv {
        Some(p) => autotune::write_csv(File::create(p)?, &report.results)?,
        None => autotune::write_csv(&mut *out, &report.results)?,
    }
    if let Some(best) = report.best() {
        writeln!(out, "best: {} [{}] {:.3} ms, {:.2} GFLOPS", best.spec, LoopConfig::with_chains("", best.chains.clone()).blocks_string(), best.median_ms, best.gflops)?;
    }
    let invalid = report.results.iter().filter(|r| !r.valid).count();
    if invalid > 0 {
        writeln!(out, "{invalid} candidate(s) failed or produced wrong results")?;
    }
    Ok(())
}

fn read_spec_list(path: &PathBuf, bounds: &[usize]) -> Result<Vec<LoopConfig>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut cfgs = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        cfgs.push(match line.split_once('\t') {
            Some((spec, blocks)) => LoopConfig::with_chains(spec.trim(), parse_blocks(blocks)?),
            None => LoopConfig::auto(line.trim(), bounds),
        });
    }
    Ok(cfgs)
}

fn model(cli: &Cli, cmd: &ModelCmd, out: &mut dyn Write) -> Result<(), CliError> {
    let p = cmd.kernel.gemm_problem()?;
    let mm = match &cmd.machine {
        Some(path) => MachineModel::load(path)?,
        None => MachineModel::host(cli.threads),
    };
    let cfgs: Vec<LoopConfig> = match &cmd.specs {
        Some(path) => read_spec_list(path, &p.bounds())?,
        None => {
            let w = GemmWorkload::<f32>::new(p, cli.seed, DataKind::Integers);
            let tc = tune_config(cli, &None, &None, &cmd.kernel, &cmd.run, cmd.max_candidates)?;
            autotune::enumerate_specs(&w.decl(), &tc)?.candidates.iter().map(Candidate::config).collect()
        }
    };
    let ranks = perfmodel::rank_schedules(&p, &cfgs, &mm);
    if !cmd.compare {
        match &cli.csv {
            Some(path) => perfmodel::write_rank_csv(File::create(path)?, &ranks)?,
            None => perfmodel::write_rank_csv(&mut *out, &ranks)?,
        }
        return Ok(());
    }
    let mut w = GemmWorkload::<f32>::new(p, cli.seed, cmd.run.kind());
    let cands: Vec<Candidate> = cfgs.iter().map(|c| Candidate { spec: c.spec.clone(), chains: c.chains.clone() }).collect();
    let tc = tune_config(cli, &None, &None, &cmd.kernel, &cmd.run, cmd.max_candidates)?;
    let measured = autotune::tune_candidates(&mut w, &cands, &tc, cands.len(), false)?;
    let modeled_rank = |spec: &str, blocks: &str| {
        ranks.iter().position(|r| r.spec == spec && r.blocks == blocks).map_or(usize::MAX, |i| i + 1)
    };
    let rows: Vec<CompareRow> = measured
        .results
        .iter()
        .map(|r| {
            let blocks = LoopConfig::with_chains("", r.chains.clone()).blocks_string();
            let score = ranks.iter().find(|x| x.spec == r.spec && x.blocks == blocks).map_or(0.0, |x| x.score);
            CompareRow {
                modeled_rank: modeled_rank(&r.spec, &blocks),
                spec: r.spec.clone(),
                blocks,
                measured_rank: r.rank,
                median_ms: r.median_ms,
                gflops: r.gflops,
                score,
            }
        })
        .collect();
    match &cli.csv {
        Some(path) => write_rows(File::create(path)?, &rows)?,
        None => write_rows(&mut *out, &rows)?,
    }
    if let Some(top) = rows.first() {
        let verdict = if top.modeled_rank <= 5 { "inside" } else { "outside" };
        writeln!(out, "fastest measured: {} (modeled rank {}, {verdict} modeled top-5)", top.spec, top.modeled_rank)?;
    }
    Ok(())
}

fn write_rows<W: Write, R: Serialize>(sink: W, rows: &[R]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(sink);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn gen_sparse(cli: &Cli, a: &GenSparseArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (bm, bk) = parse_pair(&a.block, "--block")?;
    let kind = if a.real { DataKind::Real } else { DataKind::Integers };
    let sparse = mtx::gen_block_sparse(a.m, a.k, bm, bk, a.density, cli.seed, kind)?;
    mtx::write_mtx(&a.out, &CooMatrix::from_bcsc(&sparse))?;
    writeln!(
        out,
        "wrote {}: {}x{}, {} of {} blocks ({bm}x{bk})",
        a.out.display(),
        a.m,
        a.k,
        sparse.block_count(),
        sparse.block_rows() * sparse.block_cols()
    )?;
    Ok(())
}

/// Process entry point: maps errors to exit codes (2 for usage and
/// validation failures, 1 otherwise).
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> ExitCode {
    let mut stdout = io::stdout();
    match run(args, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Args(e)) => {
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { 2 } else { 0 })
        }
        Err(e @ CliError::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
