//! Ready-to-run kernel instances with seeded operands and a reference
//! check, shared by the tuner and the command-line benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{
    run_bcsc_spmm, run_conv2d, run_gemm, run_mlp, Activation, ConvProblem, GemmProblem, KernelError, LoopConfig, MlpProblem,
};
use crate::loopspec::{LoopNestDecl, LoopSpec};
use crate::microkernels::{gelu, BcscMatrix};
use crate::tensor::{pack_vnni, BlockedTensor, Element, Layout, Matrix};

/// How operands are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataKind {
    /// Integers in `-4..=4`: every sum is exact, so results are compared bitwise.
    #[default]
    Integers,
    /// Uniform in `[-1, 1)`, compared with a relative tolerance.
    Real,
}

pub fn random_values<T: Element>(rng: &mut ChaCha8Rng, n: usize, kind: DataKind) -> Vec<T> {
    (0..n)
        .map(|_| match kind {
            DataKind::Integers => T::from_f32(rng.gen_range(-4i32..=4) as f32),
            DataKind::Real => T::from_f32(rng.gen_range(-1.0f32..1.0)),
        })
        .collect()
}

pub trait Workload {
    fn kernel(&self) -> &'static str;
    /// Logical loop bounds, in the kernel's loop order.
    fn bounds(&self) -> Vec<usize>;
    /// Loops that may be parallelized.
    fn parallelizable(&self) -> Vec<usize>;
    fn flops(&self) -> f64;
    fn run(&mut self, cfg: &LoopConfig, threads: usize) -> Result<(), KernelError>;
    /// Compares the output of the latest run against the reference.
    fn check(&mut self) -> Result<(), String>;

    /// Loop declaration with unit base steps.
    fn decl(&self) -> LoopNestDecl {
        LoopNestDecl::new(self.bounds().into_iter().map(|b| LoopSpec::new(0, b, 1)).collect())
            .expect("workload bounds are positive")
    }
}

/// Reference values computed in `f64`, plus whether `f32` arithmetic
/// reproduces them exactly.
struct Reference {
    values: Vec<f64>,
    exact: bool,
}

const EXACT_LIMIT: f64 = (1u64 << 24) as f64;

fn compare<T: Element>(got: &[T], reference: &Reference, tol: f64) -> Result<(), String> {
    if got.len() != reference.values.len() {
        return Err(format!("output has {} values, expected {}", got.len(), reference.values.len()));
    }
    let scale = reference.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (i, (&g, &w)) in got.iter().zip(&reference.values).enumerate() {
        let g = g.to_f32() as f64;
        let ok = if reference.exact { g == w } else { (g - w).abs() <= tol * scale };
        if !ok {
            return Err(format!("mismatch at {i}: got {g}, expected {w}"));
        }
    }
    Ok(())
}

fn tolerance<T: Element>() -> f64 {
    if T::NAME == "bf16" {
        1e-2
    } else {
        1e-5
    }
}

/// Dense dot products in `f64`; tracks whether every partial sum stays
/// integral and below 2^24.
fn dot_exact(terms: impl Iterator<Item = (f64, f64)>, exact: &mut bool) -> f64 {
    let mut acc = 0.0;
    for (x, y) in terms {
        acc += x * y;
        if acc.abs() >= EXACT_LIMIT || acc.fract() != 0.0 {
            *exact = false;
        }
    }
    acc
}

pub struct GemmWorkload<T> {
    pub problem: GemmProblem,
    pub a: BlockedTensor<T>,
    pub b: BlockedTensor<T>,
    pub c: BlockedTensor<T>,
    reference: Option<Reference>,
}

impl<T: Element> GemmWorkload<T> {
    pub fn new(problem: GemmProblem, seed: u64, kind: DataKind) -> Self {
        let p = problem;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let am = Matrix { rows: p.m, cols: p.k, data: random_values(&mut rng, p.m * p.k, kind) };
        let bm = Matrix { rows: p.k, cols: p.n, data: random_values(&mut rng, p.k * p.n, kind) };
        GemmWorkload {
            problem,
            a: BlockedTensor::from_matrix(&am, Layout::ABlocked { bm: p.bm, bk: p.bk }).expect("checked problem"),
            b: BlockedTensor::from_matrix(&bm, Layout::BBlocked { bk: p.bk, bn: p.bn }).expect("checked problem"),
            c: BlockedTensor::zeros(p.m, p.n, Layout::CBlocked { bm: p.bm, bn: p.bn }).expect("checked problem"),
            reference: None,
        }
    }

    fn reference(&mut self) -> &Reference {
        if self.reference.is_none() {
            let p = self.problem;
            let (a, b) = (self.a.to_matrix(), self.b.to_matrix());
            let mut exact = T::NAME == "f32";
            let mut values = vec![0.0; p.m * p.n];
            for i in 0..p.m {
                for j in 0..p.n {
                    let v = dot_exact((0..p.k).map(|k| (a.get(i, k).to_f32() as f64, b.get(k, j).to_f32() as f64)), &mut exact);
                    values[self.c.layout.offset(p.m, p.n, i, j)] = v;
                }
            }
            self.reference = Some(Reference { values, exact });
        }
        self.reference.as_ref().unwrap()
    }
}

impl<T: Element> Workload for GemmWorkload<T> {
    fn kernel(&self) -> &'static str {
        "gemm"
    }
    fn bounds(&self) -> Vec<usize> {
        self.problem.bounds().to_vec()
    }
    fn parallelizable(&self) -> Vec<usize> {
        vec![1, 2]
    }
    fn flops(&self) -> f64 {
        self.problem.flops()
    }
    fn run(&mut self, cfg: &LoopConfig, threads: usize) -> Result<(), KernelError> {
        run_gemm(&self.problem, &self.a.data, &self.b.data, &mut self.c.data, cfg, threads)
    }
    fn check(&mut self) -> Result<(), String> {
        self.reference();
        compare(&self.c.data, self.reference.as_ref().unwrap(), tolerance::<T>())
    }
}

pub struct SpmmWorkload<T> {
    pub problem: GemmProblem,
    pub v: usize,
    pub a: BcscMatrix<T>,
    pub b: BlockedTensor<T>,
    pub c: BlockedTensor<T>,
    reference: Option<Reference>,
}

impl<T: Element> SpmmWorkload<T> {
    /// Each `bm x bk` block of `A` is kept with probability `1 - sparsity`.
    pub fn new(problem: GemmProblem, sparsity: f64, v: usize, seed: u64, kind: DataKind) -> Result<Self, KernelError> {
        let p = problem;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = (1.0 - sparsity).clamp(0.0, 1.0);
        let mask: Vec<bool> = (0..p.mb() * p.kb()).map(|_| rng.gen_bool(density)).collect();
        let dense = Matrix { rows: p.m, cols: p.k, data: random_values(&mut rng, p.m * p.k, kind) };
        let a = BcscMatrix::from_dense_masked(&dense, p.bm, p.bk, |r, c| mask[r * p.kb() + c])
            .map_err(|e| KernelError::Config(e.to_string()))?;
        let bm = Matrix { rows: p.k, cols: p.n, data: random_values(&mut rng, p.k * p.n, kind) };
        Ok(SpmmWorkload {
            problem,
            v,
            a,
            b: pack_vnni(&bm, p.bn, v)?,
            c: BlockedTensor::zeros(p.m, p.n, Layout::Vnni { bn: p.bn, v })?,
            reference: None,
        })
    }

    pub fn with_matrix(problem: GemmProblem, a: BcscMatrix<T>, v: usize, seed: u64, kind: DataKind) -> Result<Self, KernelError> {
        let p = problem;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bm = Matrix { rows: p.k, cols: p.n, data: random_values(&mut rng, p.k * p.n, kind) };
        Ok(SpmmWorkload {
            problem,
            v,
            a,
            b: pack_vnni(&bm, p.bn, v)?,
            c: BlockedTensor::zeros(p.m, p.n, Layout::Vnni { bn: p.bn, v })?,
            reference: None,
        })
    }
}

impl<T: Element> Workload for SpmmWorkload<T> {
    fn kernel(&self) -> &'static str {
        "spmm"
    }
    fn bounds(&self) -> Vec<usize> {
        self.problem.bounds().to_vec()
    }
    fn parallelizable(&self) -> Vec<usize> {
        vec![1, 2]
    }
    fn flops(&self) -> f64 {
        2.0 * (self.a.block_count() * self.problem.bm * self.problem.bk * self.problem.n) as f64
    }
    fn run(&mut self, cfg: &LoopConfig, threads: usize) -> Result<(), KernelError> {
        run_bcsc_spmm(&self.problem, &self.a, &self.b.data, &mut self.c.data, self.v, cfg, threads)
    }
    fn check(&mut self) -> Result<(), String> {
        if self.reference.is_none() {
            let p = self.problem;
            let (a, b) = (self.a.to_dense(), self.b.to_matrix());
            let mut exact = T::NAME == "f32";
            let mut values = vec![0.0; p.m * p.n];
            for i in 0..p.m {
                for j in 0..p.n {
                    let v = dot_exact((0..p.k).map(|k| (a.get(i, k).to_f32() as f64, b.get(k, j).to_f32() as f64)), &mut exact);
                    values[self.c.layout.offset(p.m, p.n, i, j)] = v;
                }
            }
            self.reference = Some(Reference { values, exact });
        }
        compare(&self.c.data, self.reference.as_ref().unwrap(), tolerance::<T>())
    }
}

pub struct ConvWorkload<T> {
    pub problem: ConvProblem,
    pub input: Vec<T>,
    pub weights: Vec<T>,
    pub output: Vec<T>,
    reference: Option<Reference>,
}

impl<T: Element> ConvWorkload<T> {
    pub fn new(problem: ConvProblem, seed: u64, kind: DataKind) -> Result<Self, KernelError> {
        problem.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ConvWorkload {
            input: random_values(&mut rng, problem.input_len(), kind),
            weights: random_values(&mut rng, problem.weight_len(), kind),
            output: vec![T::default(); problem.output_len()],
            problem,
            reference: None,
        })
    }
}

impl<T: Element> Workload for ConvWorkload<T> {
    fn kernel(&self) -> &'static str {
        "conv"
    }
    fn bounds(&self) -> Vec<usize> {
        self.problem.bounds().to_vec()
    }
    fn parallelizable(&self) -> Vec<usize> {
        vec![0, 2, 3, 4]
    }
    fn flops(&self) -> f64 {
        self.problem.flops()
    }
    fn run(&mut self, cfg: &LoopConfig, threads: usize) -> Result<(), KernelError> {
        run_conv2d(&self.problem, &self.input, &self.weights, &mut self.output, cfg, threads)
    }
    fn check(&mut self) -> Result<(), String> {
        if self.reference.is_none() {
            let p = self.problem;
            let mut exact = T::NAME == "f32";
            let mut values = vec![0.0; p.output_len()];
            for n in 0..p.n {
                for k in 0..p.k {
                    for oh in 0..p.p() {
                        for ow in 0..p.q() {
                            let terms = (0..p.c).flat_map(|c| {
                                (0..p.r).flat_map(move |r| (0..p.s).map(move |s| (c, r, s)))
                            });
                            let v = dot_exact(
                                terms.map(|(c, r, s)| {
                                    let x = self.input[p.input_offset(n, c / p.bc, oh * p.str_h + r, ow * p.str_w + s) + c % p.bc];
                                    let w = self.weights[p.weight_offset(k / p.bk, c / p.bc, r, s) + (c % p.bc) * p.bk + k % p.bk];
                                    (x.to_f32() as f64, w.to_f32() as f64)
                                }),
                                &mut exact,
                            );
                            values[p.output_offset(n, k / p.bk, oh, ow) + k % p.bk] = v;
                        }
                    }
                }
            }
            self.reference = Some(Reference { values, exact });
        }
        compare(&self.output, self.reference.as_ref().unwrap(), tolerance::<T>())
    }
}

pub struct MlpWorkload<T> {
    pub problem: MlpProblem,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub input: Vec<T>,
    pub output: Vec<T>,
    reference: Option<Reference>,
}

impl<T: Element> MlpWorkload<T> {
    pub fn new(problem: MlpProblem, seed: u64, kind: DataKind) -> Result<Self, KernelError> {
        problem.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = problem.layers();
        let weights = (0..l)
            .map(|i| {
                let g = problem.layer(i);
                let m = Matrix { rows: g.m, cols: g.k, data: random_values(&mut rng, g.m * g.k, kind) };
                BlockedTensor::from_matrix(&m, Layout::ABlocked { bm: g.bm, bk: g.bk }).map(|t| t.data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let biases = if problem.bias {
            (0..l).map(|i| random_values(&mut rng, problem.dims[i + 1], kind)).collect()
        } else {
            Vec::new()
        };
        let input = random_values(&mut rng, problem.dims[0] * problem.batch, kind);
        Ok(MlpWorkload { problem, weights, biases, input, output: Vec::new(), reference: None })
    }
}

impl<T: Element> Workload for MlpWorkload<T> {
    fn kernel(&self) -> &'static str {
        "mlp"
    }
    fn bounds(&self) -> Vec<usize> {
        self.problem.layer(0).bounds().to_vec()
    }
    fn parallelizable(&self) -> Vec<usize> {
        vec![1, 2]
    }
    fn flops(&self) -> f64 {
        self.problem.flops()
    }
    fn run(&mut self, cfg: &LoopConfig, threads: usize) -> Result<(), KernelError> {
        self.output = run_mlp(&self.problem, &self.weights, &self.biases, &self.input, std::slice::from_ref(cfg), threads)?;
        Ok(())
    }
    fn check(&mut self) -> Result<(), String> {
        if self.reference.is_none() {
            let p = &self.problem;
            let mut exact = T::NAME == "f32" && p.activation != Activation::Gelu;
            // activations as row-major features x batch
            let x = BlockedTensor {
                rows: p.dims[0],
                cols: p.batch,
                layout: Layout::BBlocked { bk: p.bm, bn: p.bn },
                data: self.input.clone(),
            }
            .to_matrix();
            let mut cur: Vec<f64> = x.data.iter().map(|v| v.to_f32() as f64).collect();
            for l in 0..p.layers() {
                let g = p.layer(l);
                let w = BlockedTensor {
                    rows: g.m,
                    cols: g.k,
                    layout: Layout::ABlocked { bm: g.bm, bk: g.bk },
                    data: self.weights[l].clone(),
                }
                .to_matrix();
                let mut next = vec![0.0f64; g.m * g.n];
                for i in 0..g.m {
                    let bias = if p.bias { self.biases[l][i].to_f32() as f64 } else { 0.0 };
                    for j in 0..g.n {
                        let mut acc = bias;
                        for k in 0..g.k {
                            acc += w.get(i, k).to_f32() as f64 * cur[k * g.n + j];
                            if acc.abs() >= EXACT_LIMIT || acc.fract() != 0.0 {
                                exact = false;
                            }
                        }
                        next[i * g.n + j] = match p.activation {
                            Activation::None => acc,
                            Activation::Relu => acc.max(0.0),
                            Activation::Gelu => gelu(acc as f32) as f64,
                        };
                    }
                }
                cur = next;
            }
            let last = p.layer(p.layers() - 1);
            let layout = Layout::CBlocked { bm: last.bm, bn: last.bn };
            let mut values = vec![0.0; last.m * last.n];
            for i in 0..last.m {
                for j in 0..last.n {
                    values[layout.offset(last.m, last.n, i, j)] = cur[i * last.n + j];
                }
            }
            self.reference = Some(Reference { values, exact });
        }
        compare(&self.output, self.reference.as_ref().unwrap(), tolerance::<T>())
    }
}
