//! Kernel recipes: a loop declaration, a body written against logical
//! block indices, and a schedule string chosen by the caller.
//!
//! Layouts (all blocks column-major, see [`crate::tensor::Layout`]):
//!
//! | kernel | operands |
//! |--------|----------|
//! | GEMM   | `A[Mb][Kb][bk][bm]`, `B[Nb][Kb][bn][bk]`, `C[Nb][Mb][bn][bm]` |
//! | MLP    | weights as `A`, activations as `C` (which is `B` with `bk = bm`) |
//! | conv   | `I[N][Cb][H][W][bc]`, `W[Kb][Cb][R][S][bc][bk]`, `O[N][Kb][P][Q][bk]` |
//! | SpMM   | BCSC `A`, `B[Nb][K/v][bn][v]`, `C[Nb][M/v][bn][v]` |
//!
//! Reduction loops (GEMM/MLP/SpMM `a`; conv `b`, `f`, `g`) must stay
//! serial: several workers would otherwise update the same output block.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autotune::prefix_products;
use crate::loopexec::{self, LoopExecError, LoopNest};
use crate::loopspec::{self, LoopNestDecl, LoopSpec, LoopSpecError, ParMode};
use crate::microkernels::{
    bcsc_spmm, brgemm_offset, brgemm_stride, copy_bias_tpp, gelu_tpp, relu_tpp, zero_tpp, BcscMatrix, Beta,
    BrgemmShape,
};
use crate::tensor::{check_div, Element, ShapeError, SharedMut};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error(transparent)]
    Exec(#[from] LoopExecError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loop '{0}' is a reduction loop and cannot be parallelized")]
    ParallelReduction(char),
    #[error("invalid blocking: {0}")]
    Blocking(String),
    #[error("{0}")]
    Config(String),
}

impl From<LoopSpecError> for KernelError {
    fn from(e: LoopSpecError) -> Self {
        KernelError::Exec(LoopExecError::Spec(e))
    }
}

/// A schedule string plus, per declared loop, its step chain from the
/// outermost block step down to the base step (`[8, 2]` means block step 8,
/// base step 2). An empty `chains` means base step 1 and no blocking.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopConfig {
    pub spec: String,
    pub chains: Vec<Vec<usize>>,
}

impl LoopConfig {
    pub fn new(spec: impl Into<String>) -> Self {
        LoopConfig { spec: spec.into(), chains: Vec::new() }
    }

    pub fn with_chains(spec: impl Into<String>, chains: Vec<Vec<usize>>) -> Self {
        LoopConfig { spec: spec.into(), chains }
    }

    /// Parses the compact chain notation, e.g. `"2;4,1;1"`.
    pub fn with_blocks(spec: impl Into<String>, blocks: &str) -> Result<Self, KernelError> {
        Ok(LoopConfig { spec: spec.into(), chains: parse_blocks(blocks)? })
    }

    /// Derives block steps for every repeated mnemonic from prefix products
    /// of the loop's trip count (largest first), using base step 1.
    pub fn auto(spec: impl Into<String>, bounds: &[usize]) -> Self {
        let spec = spec.into();
        let counts = mnemonic_counts(&spec, bounds.len());
        let chains = bounds
            .iter()
            .zip(counts)
            .map(|(&t, n)| {
                let mut cands = prefix_products(t);
                cands.reverse();
                let mut chain: Vec<usize> = cands.into_iter().take(n.saturating_sub(1)).collect();
                while chain.len() + 1 < n {
                    chain.push(chain.last().copied().unwrap_or(t.max(1)));
                }
                chain.push(1);
                chain
            })
            .collect();
        LoopConfig { spec, chains }
    }

    pub fn blocks_string(&self) -> String {
        format_blocks(&self.chains)
    }

    /// Base step of loop `idx`.
    pub fn step(&self, idx: usize) -> usize {
        self.chains.get(idx).and_then(|c| c.last().copied()).unwrap_or(1)
    }

    /// Declares `bounds.len()` loops `0..bound` with this configuration's steps.
    pub fn decl(&self, bounds: &[usize]) -> Result<LoopNestDecl, KernelError> {
        if !self.chains.is_empty() && self.chains.len() != bounds.len() {
            return Err(KernelError::Blocking(format!(
                "{} step chains for {} loops",
                self.chains.len(),
                bounds.len()
            )));
        }
        let loops = bounds
            .iter()
            .enumerate()
            .map(|(i, &b)| match self.chains.get(i) {
                None => Ok(LoopSpec::new(0, b, 1)),
                Some(c) if c.is_empty() => Err(KernelError::Blocking(format!("empty chain for loop {i}"))),
                Some(c) => Ok(LoopSpec::blocked(0, b, *c.last().unwrap(), c[..c.len() - 1].to_vec())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LoopNestDecl::new(loops)?)
    }
}

/// `"8,2;4;1"`: loops separated by `;`, steps within a chain by `,`.
pub fn format_blocks(chains: &[Vec<usize>]) -> String {
    chains
        .iter()
        .map(|c| c.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_blocks(s: &str) -> Result<Vec<Vec<usize>>, KernelError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|chain| {
            chain
                .split(',')
                .map(|x| match x.trim().parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(KernelError::Blocking(format!("bad step '{x}' in '{s}'"))),
                })
                .collect()
        })
        .collect()
}

/// Occurrences per mnemonic in the loop part of `spec`, ignoring grid
/// annotations.
fn mnemonic_counts(spec: &str, nloops: usize) -> Vec<usize> {
    let body = spec.split('@').next().unwrap_or("");
    let mut counts = vec![0; nloops];
    let mut in_braces = false;
    for ch in body.chars() {
        match ch {
            '{' => in_braces = true,
            '}' => in_braces = false,
            c if !in_braces && c.is_ascii_alphabetic() => {
                let i = (c.to_ascii_lowercase() as u8 - b'a') as usize;
                if i < nloops {
                    counts[i] += 1;
                }
            }
            _ => {}
        }
    }
    counts
}

fn instantiate(cfg: &LoopConfig, bounds: &[usize], reductions: &[usize], threads: usize) -> Result<LoopNest, KernelError> {
    let decl = cfg.decl(bounds)?;
    let nest = loopexec::instantiate(&decl, &cfg.spec, threads)?;
    for inst in &nest.schedule().instances {
        if inst.parallel && reductions.contains(&inst.loop_idx) {
            return Err(KernelError::ParallelReduction(loopspec::mnemonic(inst.loop_idx)));
        }
    }
    Ok(nest)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ShapeError> {
    if expected == got {
        Ok(())
    } else {
        Err(ShapeError::Length { what, expected, got })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmProblem {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
    pub beta: Beta,
}

impl GemmProblem {
    pub fn new(m: usize, n: usize, k: usize, bm: usize, bn: usize, bk: usize) -> Result<Self, ShapeError> {
        check_div("M", m, bm)?;
        check_div("N", n, bn)?;
        check_div("K", k, bk)?;
        Ok(GemmProblem { m, n, k, bm, bn, bk, beta: Beta::Zero })
    }

    pub fn square(size: usize, block: usize) -> Result<Self, ShapeError> {
        Self::new(size, size, size, block, block, block)
    }

    pub fn mb(&self) -> usize {
        self.m / self.bm
    }
    pub fn nb(&self) -> usize {
        self.n / self.bn
    }
    pub fn kb(&self) -> usize {
        self.k / self.bk
    }

    /// Loop bounds in block units: `a = Kb`, `b = Mb`, `c = Nb`.
    pub fn bounds(&self) -> [usize; 3] {
        [self.kb(), self.mb(), self.nb()]
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = KernelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            _ => Err(KernelError::Config(format!("unknown activation '{s}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

impl Activation {
    pub fn apply<T: Element>(self, block: &mut [T]) {
        match self {
            Activation::None => {}
            Activation::Relu => relu_tpp(block),
            Activation::Gelu => gelu_tpp(block),
        }
    }
}

/// Fused output stage of a GEMM: bias at the first k step, activation once
/// the k reduction of a block completes.
#[derive(Clone, Copy)]
struct Epilogue<'a, T> {
    bias: Option<&'a [T]>,
    act: Activation,
}

/// `C = A x B` (`C += A x B` when `p.beta` is `One`).
pub fn run_gemm<T: Element, TC: Element>(
    p: &GemmProblem,
    a: &[T],
    b: &[T],
    c: &mut [TC],
    cfg: &LoopConfig,
    threads: usize,
) -> Result<(), KernelError> {
    gemm_impl(p, a, b, c, cfg, threads, Epilogue::<TC> { bias: None, act: Activation::None })
}

fn gemm_impl<T: Element, TC: Element>(
    p: &GemmProblem,
    a: &[T],
    b: &[T],
    c: &mut [TC],
    cfg: &LoopConfig,
    threads: usize,
    epi: Epilogue<'_, TC>,
) -> Result<(), KernelError> {
    check_len("A", p.m * p.k, a.len())?;
    check_len("B", p.k * p.n, b.len())?;
    check_len("C", p.m * p.n, c.len())?;
    if let Some(bias) = epi.bias {
        check_len("bias", p.m, bias.len())?;
    }
    let nest = instantiate(cfg, &p.bounds(), &[0], threads)?;
    let (mb, kb) = (p.mb(), p.kb());
    let (k_step, m_step, n_step) = (cfg.step(0), cfg.step(1), cfg.step(2));
    let shape = BrgemmShape::blocked(p.bm, p.bn, p.bk);
    let (a_blk, b_blk, c_blk) = (p.bm * p.bk, p.bk * p.bn, p.bm * p.bn);
    let out = SharedMut::new(c);
    nest.execute(|ind| {
        let (ik, im0, in0) = (ind[0], ind[1], ind[2]);
        for in_ in in0..in0 + n_step {
            for im in im0..im0 + m_step {
                // SAFETY: the (im, in) block is owned by this iteration; the
                // reduction loop is serial, so no other worker touches it.
                let cb = unsafe { out.slice_mut((in_ * mb + im) * c_blk, c_blk) };
                if ik == 0 {
                    match epi.bias {
                        Some(bias) => copy_bias_tpp(&bias[im * p.bm..(im + 1) * p.bm], cb),
                        None if p.beta == Beta::Zero => zero_tpp(cb),
                        None => {}
                    }
                }
                brgemm_stride(
                    shape,
                    a,
                    (im * kb + ik) * a_blk,
                    a_blk,
                    b,
                    (in_ * kb + ik) * b_blk,
                    b_blk,
                    cb,
                    k_step,
                    Beta::One,
                );
                if ik + k_step == kb {
                    epi.act.apply(cb);
                }
            }
        }
    });
    Ok(())
}

/// A stack of fully connected layers `O_l = act(W_l x O_{l-1} + bias_l)`.
///
/// `dims[0]` is the input width and `dims[l + 1]` the output width of layer
/// `l`; all widths share one feature block `bm` and the minibatch `batch` is
/// blocked by `bn`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpProblem {
    pub dims: Vec<usize>,
    pub batch: usize,
    pub bm: usize,
    pub bn: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl MlpProblem {
    pub fn layers(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.dims.len() < 2 {
            return Err(KernelError::Config("an MLP needs at least one layer".into()));
        }
        for &d in &self.dims {
            check_div("layer width", d, self.bm)?;
        }
        check_div("batch", self.batch, self.bn)?;
        Ok(())
    }

    pub fn layer(&self, l: usize) -> GemmProblem {
        GemmProblem {
            m: self.dims[l + 1],
            n: self.batch,
            k: self.dims[l],
            bm: self.bm,
            bn: self.bn,
            bk: self.bm,
            beta: Beta::Zero,
        }
    }

    pub fn flops(&self) -> f64 {
        (0..self.layers()).map(|l| self.layer(l).flops()).sum()
    }

    fn check_params<T>(&self, weights: &[Vec<T>], biases: &[Vec<T>], input: &[T]) -> Result<(), KernelError> {
        self.validate()?;
        let l = self.layers();
        if weights.len() != l {
            return Err(KernelError::Config(format!("{} weight tensors for {l} layers", weights.len())));
        }
        if self.bias && biases.len() != l {
            return Err(KernelError::Config(format!("{} bias vectors for {l} layers", biases.len())));
        }
        for (i, w) in weights.iter().enumerate() {
            check_len("weight", self.dims[i + 1] * self.dims[i], w.len())?;
            if self.bias {
                check_len("bias", self.dims[i + 1], biases[i].len())?;
            }
        }
        check_len("input", self.dims[0] * self.batch, input.len())?;
        Ok(())
    }
}

/// Runs the layers one after another, one `execute` per layer. `cfgs`
/// holds either one configuration for every layer or one per layer.
pub fn run_mlp<T: Element>(
    p: &MlpProblem,
    weights: &[Vec<T>],
    biases: &[Vec<T>],
    input: &[T],
    cfgs: &[LoopConfig],
    threads: usize,
) -> Result<Vec<T>, KernelError> {
    p.check_params(weights, biases, input)?;
    if cfgs.len() != 1 && cfgs.len() != p.layers() {
        return Err(KernelError::Config(format!("{} loop configs for {} layers", cfgs.len(), p.layers())));
    }
    let mut cur = input.to_vec();
    for l in 0..p.layers() {
        let g = p.layer(l);
        let mut next = vec![T::default(); g.m * g.n];
        let epi = Epilogue { bias: p.bias.then(|| biases[l].as_slice()), act: p.activation };
        gemm_impl(&g, &weights[l], &cur, &mut next, &cfgs[l.min(cfgs.len() - 1)], threads, epi)?;
        cur = next;
    }
    Ok(cur)
}

/// Single-`execute` MLP over equal-width layers. A fourth loop `d` walks the
/// layers; it must be the outermost loop, serial, and (for parallel
/// schedules) the level directly inside it must end in a barrier, e.g.
/// `"dBC|a"`.
pub fn run_mlp_cascade<T: Element>(
    p: &MlpProblem,
    weights: &[Vec<T>],
    biases: &[Vec<T>],
    input: &[T],
    cfg: &LoopConfig,
    threads: usize,
) -> Result<Vec<T>, KernelError> {
    p.check_params(weights, biases, input)?;
    if p.dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(KernelError::Config("cascaded MLP needs equal layer widths".into()));
    }
    let g = p.layer(0);
    let nl = p.layers();
    let [kb_, mb_, nb_] = g.bounds();
    let nest = instantiate(cfg, &[kb_, mb_, nb_, nl], &[0, 3], threads)?;
    check_layer_barrier(&nest)?;
    if cfg.step(3) != 1 {
        return Err(KernelError::Blocking("layer loop must use step 1".into()));
    }
    let size = g.m * g.n;
    let mut acts = vec![T::default(); (nl + 1) * size];
    acts[..size].copy_from_slice(input);
    let (mb, kb) = (g.mb(), g.kb());
    let (k_step, m_step, n_step) = (cfg.step(0), cfg.step(1), cfg.step(2));
    let shape = BrgemmShape::blocked(g.bm, g.bn, g.bk);
    let (a_blk, c_blk) = (g.bm * g.bk, g.bm * g.bn);
    let buf = SharedMut::new(&mut acts);
    nest.execute(|ind| {
        let (ik, im0, in0, l) = (ind[0], ind[1], ind[2], ind[3]);
        // SAFETY: layer l only reads slot l, completed before the barrier
        // that ends the previous layer, and writes disjoint blocks of slot l + 1.
        let src = unsafe { buf.slice(l * size, size) };
        for in_ in in0..in0 + n_step {
            for im in im0..im0 + m_step {
                let cb = unsafe { buf.slice_mut((l + 1) * size + (in_ * mb + im) * c_blk, c_blk) };
                if ik == 0 {
                    if p.bias {
                        copy_bias_tpp(&biases[l][im * g.bm..(im + 1) * g.bm], cb);
                    } else {
                        zero_tpp(cb);
                    }
                }
                brgemm_stride(
                    shape,
                    &weights[l],
                    (im * kb + ik) * a_blk,
                    a_blk,
                    src,
                    (in_ * kb + ik) * c_blk,
                    c_blk,
                    cb,
                    k_step,
                    Beta::One,
                );
                if ik + k_step == kb {
                    p.activation.apply(cb);
                }
            }
        }
    });
    Ok(acts[nl * size..].to_vec())
}

fn check_layer_barrier(nest: &LoopNest) -> Result<(), KernelError> {
    let s = nest.schedule();
    let first = &s.instances[0];
    let bad = |why: &str| Err(KernelError::Config(format!("cascaded MLP schedule '{}': {why}", s.source_string)));
    if first.loop_idx != 3 || s.occurrences(3) != 1 {
        return bad("the layer loop 'd' must appear once, outermost");
    }
    if s.par_mode == ParMode::Serial || nest.team_size() == 1 {
        return Ok(());
    }
    let par = s.parallel_positions();
    let closing = match s.par_mode {
        ParMode::WorkShare if par[0] == 1 => *par.last().unwrap(),
        _ => 1,
    };
    if s.instances.len() < 2 || !s.instances[closing].barrier_after {
        return bad("the level inside 'd' must end with a barrier ('|')");
    }
    Ok(())
}

/// Direct convolution without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvProblem {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub s: usize,
    pub str_h: usize,
    pub str_w: usize,
    pub bc: usize,
    pub bk: usize,
}

impl ConvProblem {
    pub fn validate(&self) -> Result<(), KernelError> {
        check_div("C", self.c, self.bc)?;
        check_div("K", self.k, self.bk)?;
        if self.r == 0 || self.s == 0 || self.r > self.h || self.s > self.w || self.str_h == 0 || self.str_w == 0 {
            return Err(KernelError::Config(format!(
                "filter {}x{} stride {}x{} does not fit input {}x{}",
                self.r, self.s, self.str_h, self.str_w, self.h, self.w
            )));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        (self.h - self.r) / self.str_h + 1
    }
    pub fn q(&self) -> usize {
        (self.w - self.s) / self.str_w + 1
    }
    pub fn cb(&self) -> usize {
        self.c / self.bc
    }
    pub fn kb(&self) -> usize {
        self.k / self.bk
    }

    /// Loop bounds: `a = N`, `b = Cb`, `c = Kb`, `d = P`, `e = Q`, `f = R`, `g = S`.
    pub fn bounds(&self) -> [usize; 7] {
        [self.n, self.cb(), self.kb(), self.p(), self.q(), self.r, self.s]
    }

    pub fn input_len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
    pub fn weight_len(&self) -> usize {
        self.k * self.c * self.r * self.s
    }
    pub fn output_len(&self) -> usize {
        self.n * self.k * self.p() * self.q()
    }

    pub fn flops(&self) -> f64 {
        2.0 * (self.n * self.k * self.p() * self.q()) as f64 * (self.c * self.r * self.s) as f64
    }

    /// Offset of `I[n][cb][h][w][0]`.
    pub fn input_offset(&self, n: usize, cb: usize, h: usize, w: usize) -> usize {
        (((n * self.cb() + cb) * self.h + h) * self.w + w) * self.bc
    }
    /// Offset of `W[kb][cb][r][s][0][0]`.
    pub fn weight_offset(&self, kb: usize, cb: usize, r: usize, s: usize) -> usize {
        (((kb * self.cb() + cb) * self.r + r) * self.s + s) * self.bc * self.bk
    }
    /// Offset of `O[n][kb][p][q][0]`.
    pub fn output_offset(&self, n: usize, kb: usize, p: usize, q: usize) -> usize {
        (((n * self.kb() + kb) * self.p() + p) * self.q() + q) * self.bk
    }
}

pub fn run_conv2d<T: Element, TC: Element>(
    p: &ConvProblem,
    input: &[T],
    weights: &[T],
    output: &mut [TC],
    cfg: &LoopConfig,
    threads: usize,
) -> Result<(), KernelError> {
    p.validate()?;
    check_len("input", p.input_len(), input.len())?;
    check_len("weights", p.weight_len(), weights.len())?;
    check_len("output", p.output_len(), output.len())?;
    let nest = instantiate(cfg, &p.bounds(), &[1, 5, 6], threads)?;
    let [n_step, c_step, k_step, h_step, w_step, r_step, s_step] = std::array::from_fn(|i| cfg.step(i));
    let shape = BrgemmShape { m: p.bk, n: w_step, k: p.bc, lda: p.bk, ldb: p.str_w * p.bc, ldc: p.bk };
    let brcount = c_step * r_step * s_step;
    let (mut offs_w, mut offs_i) = (Vec::new(), Vec::new());
    for c in 0..c_step {
        for r in 0..r_step {
            for s in 0..s_step {
                offs_w.push(p.weight_offset(0, c, r, s));
                offs_i.push(p.input_offset(0, c, r, s));
            }
        }
    }
    let pointwise = p.r == 1 && p.s == 1;
    let seg = w_step * p.bk;
    let out = SharedMut::new(output);
    nest.execute(|ind| {
        let [in0, ic, ik0, ih0, iw, ir, is] = [ind[0], ind[1], ind[2], ind[3], ind[4], ind[5], ind[6]];
        for in_ in in0..in0 + n_step {
            for ik in ik0..ik0 + k_step {
                for ih in ih0..ih0 + h_step {
                    // SAFETY: the output row segment is owned by this
                    // iteration; reduction loops are serial.
                    let ob = unsafe { out.slice_mut(p.output_offset(in_, ik, ih, iw), seg) };
                    if ic == 0 && ir == 0 && is == 0 {
                        zero_tpp(ob);
                    }
                    let wb = p.weight_offset(ik, ic, ir, is);
                    let ib = p.input_offset(in_, ic, ih * p.str_h + ir, iw * p.str_w + is);
                    if pointwise {
                        let (sw, si) = (p.bc * p.bk, p.h * p.w * p.bc);
                        brgemm_stride(shape, weights, wb, sw, input, ib, si, ob, brcount, Beta::One);
                    } else {
                        brgemm_offset(shape, weights, wb, &offs_w, input, ib, &offs_i, ob, brcount, Beta::One);
                    }
                }
            }
        }
    });
    Ok(())
}

/// `C = A x B` with block-sparse `A`; `B` and `C` VNNI-packed with factor `v`.
#[allow(clippy::too_many_arguments)]
pub fn run_bcsc_spmm<TA: Element, TB: Element, TC: Element>(
    p: &GemmProblem,
    a: &BcscMatrix<TA>,
    b: &[TB],
    c: &mut [TC],
    v: usize,
    cfg: &LoopConfig,
    threads: usize,
) -> Result<(), KernelError> {
    if (a.m, a.k, a.bm, a.bk) != (p.m, p.k, p.bm, p.bk) {
        return Err(ShapeError::Mismatch(format!(
            "sparse A is {}x{} in {}x{} blocks, problem wants {}x{} in {}x{}",
            a.m, a.k, a.bm, a.bk, p.m, p.k, p.bm, p.bk
        ))
        .into());
    }
    check_div("K", p.k, v)?;
    check_div("bm", p.bm, v)?;
    check_div("bk", p.bk, v)?;
    check_len("B", p.k * p.n, b.len())?;
    check_len("C", p.m * p.n, c.len())?;
    let nest = instantiate(cfg, &p.bounds(), &[0], threads)?;
    let (k_step, m_step, n_step) = (cfg.step(0), cfg.step(1), cfg.step(2));
    let (bm, bn) = (p.bm, p.bn);
    let out = SharedMut::new(c);
    nest.execute(|ind| {
        let (ik, im0, in0) = (ind[0], ind[1], ind[2]);
        for in_ in in0..in0 + n_step {
            let panel = &b[in_ * p.k * bn..(in_ + 1) * p.k * bn];
            for im in im0..im0 + m_step {
                // SAFETY: C block (im, in) is owned by this iteration.
                let cb = unsafe { out.slice_mut(in_ * p.m * bn + im * bm * bn, bm * bn) };
                if ik == 0 {
                    zero_tpp(cb);
                }
                bcsc_spmm(a, im, ik..ik + k_step, panel, cb, bn, v);
            }
        }
    });
    Ok(())
}
