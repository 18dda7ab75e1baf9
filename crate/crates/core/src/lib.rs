//! Runtime-instantiated loop nests driving batch-reduce GEMM micro-kernels.
//!
//! A kernel declares its logical loops once ([`loopspec::LoopNestDecl`]) and
//! writes its body against logical indices. A short schedule string picked
//! at runtime decides loop order, blocking depth and parallelization
//! ([`loopspec`], [`loopexec`]). On top of that sit portable micro-kernels
//! ([`microkernels`]), GEMM / MLP / convolution / block-sparse recipes
//! ([`kernels`]), a constraint-driven schedule enumerator and benchmark
//! harness ([`autotune`]), and a slice-trace cache simulator ([`perfmodel`]).

pub mod autotune;
pub mod bf16;
pub mod cli;
pub mod kernels;
pub mod loopexec;
pub mod loopspec;
pub mod microkernels;
pub mod mtx;
pub mod perfmodel;
pub mod tensor;
pub mod workload;

pub use bf16::Bf16;
pub use loopexec::{instantiate, ExecutorCache, LoopExecError, LoopNest};
pub use loopspec::{parse, LoopNestDecl, LoopSpec, LoopSpecError, Schedule};
