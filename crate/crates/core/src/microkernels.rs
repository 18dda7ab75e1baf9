//! Portable micro-kernels: batch-reduce GEMM, block-sparse x dense, and the
//! elementwise epilogues kernels fuse around them.
//!
//! All contraction kernels use column-major operand blocks: `A(i, p)` at
//! `a[p * lda + i]`, `B(p, j)` at `b[j * ldb + p]`, `C(i, j)` at
//! `c[j * ldc + i]`. That is exactly how a single block of the
//! `A[Mb][Kb][bk][bm]`, `B[Nb][Kb][bn][bk]` and `C[Nb][Mb][bn][bm]` layouts is
//! stored.
//!
//! Every `C` element is accumulated in `f32`, starting from `beta * C`, and
//! then adding products batch-entry by batch-entry, `k` ascending inside
//! each entry. The order does not depend on tiling, so results are
//! reproducible bit-for-bit.

use std::ops::Range;

use thiserror::Error;

use crate::tensor::{check_div, Element, Matrix, ShapeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Beta {
    Zero,
    One,
}

/// Geometry of one BRGEMM call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrgemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lda: usize,
    pub ldb: usize,
    pub ldc: usize,
}

impl BrgemmShape {
    /// Shape for one block of the standard blocked GEMM layouts.
    pub fn blocked(bm: usize, bn: usize, bk: usize) -> Self {
        BrgemmShape { m: bm, n: bn, k: bk, lda: bm, ldb: bk, ldc: bm }
    }

    fn a_extent(&self) -> usize {
        if self.m == 0 || self.k == 0 {
            0
        } else {
            (self.k - 1) * self.lda + self.m
        }
    }

    fn b_extent(&self) -> usize {
        if self.n == 0 || self.k == 0 {
            0
        } else {
            (self.n - 1) * self.ldb + self.k
        }
    }

    fn c_extent(&self) -> usize {
        if self.n == 0 || self.m == 0 {
            0
        } else {
            (self.n - 1) * self.ldc + self.m
        }
    }
}

/// `C = beta * C + sum_i A_i x B_i` with `A_i` at `a_base + i * stride_a`
/// and `B_i` at `b_base + i * stride_b` (element offsets).
#[allow(clippy::too_many_arguments)]
pub fn brgemm_stride<TA: Element, TB: Element, TC: Element>(
    shape: BrgemmShape,
    a: &[TA],
    a_base: usize,
    stride_a: usize,
    b: &[TB],
    b_base: usize,
    stride_b: usize,
    c: &mut [TC],
    brcount: usize,
    beta: Beta,
) {
    brgemm_core(shape, a, |i| a_base + i * stride_a, b, |i| b_base + i * stride_b, c, brcount, beta);
}

/// As [`brgemm_stride`] but with explicit per-entry offsets.
#[allow(clippy::too_many_arguments)]
pub fn brgemm_offset<TA: Element, TB: Element, TC: Element>(
    shape: BrgemmShape,
    a: &[TA],
    a_base: usize,
    offs_a: &[usize],
    b: &[TB],
    b_base: usize,
    offs_b: &[usize],
    c: &mut [TC],
    brcount: usize,
    beta: Beta,
) {
    assert!(offs_a.len() >= brcount && offs_b.len() >= brcount, "offset arrays shorter than brcount");
    brgemm_core(shape, a, |i| a_base + offs_a[i], b, |i| b_base + offs_b[i], c, brcount, beta);
}

#[allow(clippy::too_many_arguments)]
fn brgemm_core<TA: Element, TB: Element, TC: Element>(
    s: BrgemmShape,
    a: &[TA],
    a_off: impl Fn(usize) -> usize + Copy,
    b: &[TB],
    b_off: impl Fn(usize) -> usize + Copy,
    c: &mut [TC],
    brcount: usize,
    beta: Beta,
) {
    assert!(c.len() >= s.c_extent(), "C block too small");
    for i in 0..brcount {
        assert!(a_off(i) + s.a_extent() <= a.len(), "A_{i} out of bounds");
        assert!(b_off(i) + s.b_extent() <= b.len(), "B_{i} out of bounds");
    }
    let k = Kernel { s, a, a_off, b, b_off, brcount, beta };
    let mut j = 0;
    while j + 4 <= s.n {
        k.columns::<4, TC>(c, j);
        j += 4;
    }
    while j < s.n {
        k.columns::<1, TC>(c, j);
        j += 1;
    }
}

struct Kernel<'a, TA, TB, FA, FB> {
    s: BrgemmShape,
    a: &'a [TA],
    a_off: FA,
    b: &'a [TB],
    b_off: FB,
    brcount: usize,
    beta: Beta,
}

impl<TA, TB, FA, FB> Kernel<'_, TA, TB, FA, FB>
where
    TA: Element,
    TB: Element,
    FA: Fn(usize) -> usize + Copy,
    FB: Fn(usize) -> usize + Copy,
{
    #[inline(always)]
    fn columns<const NR: usize, TC: Element>(&self, c: &mut [TC], j0: usize) {
        let mut i = 0;
        while i + 16 <= self.s.m {
            self.tile::<16, NR, TC>(c, i, j0);
            i += 16;
        }
        if i + 8 <= self.s.m {
            self.tile::<8, NR, TC>(c, i, j0);
            i += 8;
        }
        if i + 4 <= self.s.m {
            self.tile::<4, NR, TC>(c, i, j0);
            i += 4;
        }
        while i < self.s.m {
            self.tile::<1, NR, TC>(c, i, j0);
            i += 1;
        }
    }

    #[inline(always)]
    fn tile<const MR: usize, const NR: usize, TC: Element>(&self, c: &mut [TC], i0: usize, j0: usize) {
        let s = self.s;
        let mut acc = [[0f32; MR]; NR];
        if self.beta == Beta::One {
            for (jj, col) in acc.iter_mut().enumerate() {
                let base = (j0 + jj) * s.ldc + i0;
                for (ii, x) in col.iter_mut().enumerate() {
                    *x = c[base + ii].to_f32();
                }
            }
        }
        for br in 0..self.brcount {
            let ao = (self.a_off)(br) + i0;
            let bo = (self.b_off)(br) + j0 * s.ldb;
            let a = &self.a[ao..ao + s.a_extent().saturating_sub(i0).max(MR)];
            let b = &self.b[bo..bo + (NR - 1) * s.ldb + s.k];
            for p in 0..s.k {
                let arow: &[TA; MR] = a[p * s.lda..p * s.lda + MR].try_into().unwrap();
                let av: [f32; MR] = std::array::from_fn(|ii| arow[ii].to_f32());
                for (jj, col) in acc.iter_mut().enumerate() {
                    let bv = b[jj * s.ldb + p].to_f32();
                    for ii in 0..MR {
                        col[ii] += av[ii] * bv;
                    }
                }
            }
        }
        for (jj, col) in acc.iter().enumerate() {
            let base = (j0 + jj) * s.ldc + i0;
            for (ii, &x) in col.iter().enumerate() {
                c[base + ii] = TC::from_f32(x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BcscError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid block structure: {0}")]
    Structure(String),
}

/// Block-sparse matrix: nonzero `bm x bk` blocks grouped by block row.
///
/// Block row `r` owns blocks `ptr[r]..ptr[r + 1]`; `blk_idx[j]` is the block
/// column of block `j` and its values sit at `values[j * bm * bk..]` stored
/// `[bk][bm]` (rows fastest), like a dense `A` block.
#[derive(Debug, Clone, PartialEq)]
pub struct BcscMatrix<T> {
    pub m: usize,
    pub k: usize,
    pub bm: usize,
    pub bk: usize,
    pub ptr: Vec<usize>,
    pub blk_idx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Element> BcscMatrix<T> {
    pub fn new(
        m: usize,
        k: usize,
        bm: usize,
        bk: usize,
        ptr: Vec<usize>,
        blk_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, BcscError> {
        check_div("m", m, bm)?;
        check_div("k", k, bk)?;
        let (mb, kb) = (m / bm, k / bk);
        let bad = |s: String| Err(BcscError::Structure(s));
        if ptr.len() != mb + 1 || ptr[0] != 0 {
            return bad(format!("ptr must have {} entries starting at 0", mb + 1));
        }
        if ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("ptr is not non-decreasing".into());
        }
        if ptr[mb] != blk_idx.len() {
            return bad(format!("ptr ends at {} but there are {} blocks", ptr[mb], blk_idx.len()));
        }
        for r in 0..mb {
            let row = &blk_idx[ptr[r]..ptr[r + 1]];
            if row.iter().any(|&c| c >= kb) || row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("block row {r}: columns out of range or not increasing"));
            }
        }
        if values.len() != blk_idx.len() * bm * bk {
            return bad(format!("{} values for {} blocks", values.len(), blk_idx.len()));
        }
        Ok(BcscMatrix { m, k, bm, bk, ptr, blk_idx, values })
    }

    /// Keeps block `(r, c)` of `dense` when `keep(r, c)` holds.
    pub fn from_dense_masked(
        dense: &Matrix<T>,
        bm: usize,
        bk: usize,
        mut keep: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, BcscError> {
        check_div("m", dense.rows, bm)?;
        check_div("k", dense.cols, bk)?;
        let (mb, kb) = (dense.rows / bm, dense.cols / bk);
        let mut ptr = vec![0];
        let mut blk_idx = Vec::new();
        let mut values = Vec::new();
        for r in 0..mb {
            for c in 0..kb {
                if !keep(r, c) {
                    continue;
                }
                blk_idx.push(c);
                for p in 0..bk {
                    for i in 0..bm {
                        values.push(dense.get(r * bm + i, c * bk + p));
                    }
                }
            }
            ptr.push(blk_idx.len());
        }
        Self::new(dense.rows, dense.cols, bm, bk, ptr, blk_idx, values)
    }

    /// Stores every block that holds at least one nonzero entry.
    pub fn from_dense(dense: &Matrix<T>, bm: usize, bk: usize) -> Result<Self, BcscError> {
        let zero = T::default();
        Self::from_dense_masked(dense, bm, bk, |r, c| {
            (0..bm).any(|i| (0..bk).any(|p| dense.get(r * bm + i, c * bk + p) != zero))
        })
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.m, self.k);
        for r in 0..self.block_rows() {
            for j in self.ptr[r]..self.ptr[r + 1] {
                let c = self.blk_idx[j];
                let vals = self.block(j);
                for p in 0..self.bk {
                    for i in 0..self.bm {
                        out.set(r * self.bm + i, c * self.bk + p, vals[p * self.bm + i]);
                    }
                }
            }
        }
        out
    }

    pub fn block_rows(&self) -> usize {
        self.m / self.bm
    }

    pub fn block_cols(&self) -> usize {
        self.k / self.bk
    }

    pub fn block_count(&self) -> usize {
        self.blk_idx.len()
    }

    /// Fraction of blocks stored.
    pub fn density(&self) -> f64 {
        self.block_count() as f64 / (self.block_rows() * self.block_cols()).max(1) as f64
    }

    pub fn block(&self, j: usize) -> &[T] {
        let sz = self.bm * self.bk;
        &self.values[j * sz..(j + 1) * sz]
    }

    /// Blocks of row `r` whose block column lies in `cols`.
    pub fn row_blocks(&self, r: usize, cols: Range<usize>) -> Range<usize> {
        let (lo, hi) = (self.ptr[r], self.ptr[r + 1]);
        let row = &self.blk_idx[lo..hi];
        let first = lo + row.partition_point(|&c| c < cols.start);
        let last = lo + row.partition_point(|&c| c < cols.end);
        first..last
    }
}

/// `C += sum A(r, kb) x B(kb)` over the stored blocks of block row `r`
/// whose block column falls in `kb_range`.
///
/// `b` is one `bn`-wide column panel of a VNNI-packed `B` (`[K/v][bn][v]`,
/// all `K` rows) and `c` is the `bm x bn` output block in the same packing.
pub fn bcsc_spmm<TA: Element, TB: Element, TC: Element>(
    a: &BcscMatrix<TA>,
    block_row: usize,
    kb_range: Range<usize>,
    b: &[TB],
    c: &mut [TC],
    bn: usize,
    v: usize,
) {
    let (bm, bk) = (a.bm, a.bk);
    assert!(b.len() >= a.k * bn, "B panel too small");
    assert!(c.len() >= bm * bn, "C block too small");
    assert!(bm % v == 0 && bk % v == 0, "block sizes must be multiples of v");
    let blocks = a.row_blocks(block_row, kb_range);
    if blocks.is_empty() {
        return;
    }
    const IR: usize = 4;
    const NC: usize = 16;
    let c_at = |i: usize, n: usize| (i / v) * bn * v + n * v + i % v;
    let b_at = |k: usize, n: usize| (k / v) * bn * v + n * v + k % v;
    for n0 in (0..bn).step_by(NC) {
        let w = NC.min(bn - n0);
        for i0 in (0..bm).step_by(IR) {
            let r = IR.min(bm - i0);
            let mut acc = [[0f32; NC]; IR];
            for (ii, row) in acc.iter_mut().enumerate().take(r) {
                for (nn, x) in row.iter_mut().enumerate().take(w) {
                    *x = c[c_at(i0 + ii, n0 + nn)].to_f32();
                }
            }
            for j in blocks.clone() {
                let vals = a.block(j);
                let k0 = a.blk_idx[j] * bk;
                for p in 0..bk {
                    let k = k0 + p;
                    let mut bv = [0f32; NC];
                    if v == 1 {
                        for (x, y) in bv.iter_mut().zip(&b[k * bn + n0..k * bn + n0 + w]) {
                            *x = y.to_f32();
                        }
                    } else {
                        for (nn, x) in bv.iter_mut().enumerate().take(w) {
                            *x = b[b_at(k, n0 + nn)].to_f32();
                        }
                    }
                    let col = &vals[p * bm + i0..p * bm + i0 + r];
                    for (row, av) in acc.iter_mut().zip(col) {
                        let av = av.to_f32();
                        for (x, &y) in row.iter_mut().zip(&bv) {
                            *x += av * y;
                        }
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate().take(r) {
                for (nn, &x) in row.iter().enumerate().take(w) {
                    c[c_at(i0 + ii, n0 + nn)] = TC::from_f32(x);
                }
            }
        }
    }
}

pub fn zero_tpp<T: Element>(block: &mut [T]) {
    block.fill(T::default());
}

pub fn relu_tpp<T: Element>(block: &mut [T]) {
    for x in block.iter_mut() {
        if x.to_f32() < 0.0 {
            *x = T::default();
        }
    }
}

/// Tanh-approximated GELU, evaluated in `f64` and rounded once.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    let u = SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

pub fn gelu_tpp<T: Element>(block: &mut [T]) {
    for x in block.iter_mut() {
        *x = T::from_f32(gelu(x.to_f32()));
    }
}

/// Broadcasts `bias` over consecutive `bias.len()`-long runs of `block`.
pub fn copy_bias_tpp<T: Element>(bias: &[T], block: &mut [T]) {
    assert!(!bias.is_empty() && block.len() % bias.len() == 0, "block is not a whole number of bias rows");
    for row in block.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

pub fn add_tpp<T: Element>(x: &[T], y: &[T], out: &mut [T]) {
    assert!(x.len() == out.len() && y.len() == out.len());
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
        *o = T::from_f32(a.to_f32() + b.to_f32());
    }
}

/// In-place form of [`add_tpp`]: `acc += y`.
pub fn add_assign_tpp<T: Element>(acc: &mut [T], y: &[T]) {
    assert_eq!(acc.len(), y.len());
    for (o, &b) in acc.iter_mut().zip(y) {
        *o = T::from_f32(o.to_f32() + b.to_f32());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bf16::Bf16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ints(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-4i32..=4) as f32).collect()
    }

    /// Column-major naive `C += A x B` for one block pair.
    fn naive_acc(s: BrgemmShape, a: &[f32], b: &[f32], c: &mut [f32]) {
        for j in 0..s.n {
            for i in 0..s.m {
                let mut acc = c[j * s.ldc + i];
                for p in 0..s.k {
                    acc += a[p * s.lda + i] * b[j * s.ldb + p];
                }
                c[j * s.ldc + i] = acc;
            }
        }
    }

    #[test]
    fn identity_times_b() {
        let s = BrgemmShape::blocked(2, 2, 2);
        let a = [1.0f32, 0.0, 0.0, 1.0];
        let b = [3.0f32, -1.0, 7.5, 2.0];
        let mut c = [9.0f32; 4];
        brgemm_stride(s, &a, 0, 0, &b, 0, 0, &mut c, 1, Beta::Zero);
        assert_eq!(c, b);
    }

    #[test]
    fn empty_batch() {
        let s = BrgemmShape::blocked(2, 2, 2);
        let mut c = [1.0f32, 2.0, 3.0, 4.0];
        brgemm_stride::<f32, f32, f32>(s, &[], 0, 4, &[], 0, 4, &mut c, 0, Beta::One);
        assert_eq!(c, [1.0, 2.0, 3.0, 4.0]);
        brgemm_offset::<f32, f32, f32>(s, &[], 0, &[], &[], 0, &[], &mut c, 0, Beta::Zero);
        assert_eq!(c, [0.0; 4]);
    }

    #[test]
    fn two_step_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (bm, bn, bk) in [(4, 4, 4), (16, 4, 8), (19, 7, 5), (32, 32, 32), (1, 1, 3)] {
            let s = BrgemmShape::blocked(bm, bn, bk);
            let a = ints(&mut rng, 2 * bm * bk);
            let b = ints(&mut rng, 2 * bk * bn);
            let c0 = ints(&mut rng, bm * bn);
            let mut expected = c0.clone();
            naive_acc(s, &a[..bm * bk], &b[..bk * bn], &mut expected);
            naive_acc(s, &a[bm * bk..], &b[bk * bn..], &mut expected);
            let mut c = c0.clone();
            brgemm_stride(s, &a, 0, bm * bk, &b, 0, bk * bn, &mut c, 2, Beta::One);
            assert_eq!(c, expected, "{bm}x{bn}x{bk}");
        }
    }

    #[test]
    fn offsets_reproduce_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = BrgemmShape::blocked(8, 4, 4);
        let a = ints(&mut rng, 3 * 32);
        let b = ints(&mut rng, 3 * 16);
        let mut c1 = vec![0.0f32; 32];
        let mut c2 = vec![5.0f32; 32];
        brgemm_stride(s, &a, 0, 32, &b, 0, 16, &mut c1, 3, Beta::Zero);
        brgemm_offset(s, &a, 0, &[0, 32, 64], &b, 0, &[0, 16, 32], &mut c2, 3, Beta::Zero);
        assert_eq!(c1, c2);
    }

    #[test]
    fn strided_leading_dims() {
        // B columns 3 elements apart, A padded rows
        let s = BrgemmShape { m: 3, n: 2, k: 2, lda: 4, ldb: 3, ldc: 5 };
        let a = [1.0f32, 2.0, 3.0, 99.0, 4.0, 5.0, 6.0, 99.0];
        let b = [1.0f32, 10.0, 99.0, 2.0, 20.0];
        let mut c = [0.0f32; 8];
        brgemm_stride(s, &a, 0, 0, &b, 0, 0, &mut c, 1, Beta::Zero);
        assert_eq!(&c[..3], &[41.0, 52.0, 63.0]);
        assert_eq!(&c[5..8], &[82.0, 104.0, 126.0]);
        assert_eq!(&c[3..5], &[0.0, 0.0]);
    }

    #[test]
    fn bf16_inputs_f32_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = BrgemmShape::blocked(16, 8, 16);
        let a: Vec<f32> = (0..256).map(|_| rng.gen_range(-64i32..=64) as f32).collect();
        let b: Vec<f32> = (0..128).map(|_| rng.gen_range(-64i32..=64) as f32).collect();
        let a16: Vec<Bf16> = a.iter().map(|&x| Bf16::from_f32(x)).collect();
        let b16: Vec<Bf16> = b.iter().map(|&x| Bf16::from_f32(x)).collect();
        let mut c = vec![0.0f32; 128];
        let mut c16 = vec![0.0f32; 128];
        brgemm_stride(s, &a, 0, 0, &b, 0, 0, &mut c, 1, Beta::Zero);
        brgemm_stride(s, &a16, 0, 0, &b16, 0, 0, &mut c16, 1, Beta::Zero);
        assert_eq!(c, c16);
    }

    fn masked_dense(rng: &mut ChaCha8Rng, m: usize, k: usize, bm: usize, bk: usize, p: f64) -> (Matrix<f32>, Vec<bool>) {
        let (mb, kb) = (m / bm, k / bk);
        let mask: Vec<bool> = (0..mb * kb).map(|_| rng.gen_bool(p)).collect();
        let dense = Matrix::from_fn(m, k, |r, c| {
            if mask[(r / bm) * kb + c / bk] {
                rng.gen_range(1i32..=4) as f32
            } else {
                0.0
            }
        });
        (dense, mask)
    }

    #[test]
    fn bcsc_round_trip_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (dense, mask) = masked_dense(&mut rng, 16, 24, 4, 8, 0.5);
        let a = BcscMatrix::from_dense(&dense, 4, 8).unwrap();
        assert_eq!(a.block_count(), mask.iter().filter(|&&x| x).count());
        assert_eq!(a.to_dense(), dense);
        assert!(BcscMatrix::<f32>::new(8, 8, 4, 4, vec![0, 1, 1], vec![2], vec![0.0; 16]).is_err());
        assert!(BcscMatrix::<f32>::new(8, 8, 4, 4, vec![0, 2, 2], vec![1, 0], vec![0.0; 32]).is_err());
        assert!(BcscMatrix::<f32>::new(8, 8, 4, 4, vec![0, 1, 1], vec![1], vec![0.0; 16]).is_ok());
    }

    #[test]
    fn bcsc_empty_row_leaves_c() {
        let dense = Matrix::<f32>::zeros(8, 8);
        let a = BcscMatrix::from_dense(&dense, 4, 4).unwrap();
        let b = vec![1.0f32; 8 * 4];
        let mut c = vec![3.0f32; 16];
        bcsc_spmm(&a, 0, 0..2, &b, &mut c, 4, 1);
        assert_eq!(c, vec![3.0; 16]);
    }

    #[test]
    fn bcsc_matches_masked_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(bm, bk, v) in &[(4, 4, 1), (8, 4, 2), (4, 8, 1), (16, 16, 2)] {
            let (m, k, bn) = (32, 32, 8);
            let (dense, _) = masked_dense(&mut rng, m, k, bm, bk, 0.5);
            let a = BcscMatrix::from_dense(&dense, bm, bk).unwrap();
            let bmat = Matrix::from_fn(k, bn, |_, _| rng.gen_range(-4i32..=4) as f32);
            let b = crate::tensor::pack_vnni(&bmat, bn, v).unwrap();
            for r in 0..m / bm {
                let mut c = vec![0.0f32; bm * bn];
                bcsc_spmm(&a, r, 0..k / bk, &b.data, &mut c, bn, v);
                for i in 0..bm {
                    for n in 0..bn {
                        let want: f32 = (0..k).map(|p| dense.get(r * bm + i, p) * bmat.get(p, n)).sum();
                        assert_eq!(c[(i / v) * bn * v + n * v + i % v], want);
                    }
                }
            }
        }
    }

    #[test]
    fn bcsc_column_range_restricts_blocks() {
        let dense = Matrix::from_fn(4, 8, |_, _| 1.0f32);
        let a = BcscMatrix::from_dense(&dense, 4, 4).unwrap();
        let b = vec![1.0f32; 8 * 2];
        let mut c = vec![0.0f32; 8];
        bcsc_spmm(&a, 0, 1..2, &b, &mut c, 2, 1);
        assert_eq!(c, vec![4.0; 8]);
    }

    #[test]
    fn epilogues() {
        let mut x = vec![-1.0f32, 2.0, -0.5, 0.0];
        relu_tpp(&mut x);
        assert_eq!(x, vec![0.0, 2.0, 0.0, 0.0]);
        let once = x.clone();
        relu_tpp(&mut x);
        assert_eq!(x, once);
        zero_tpp(&mut x);
        relu_tpp(&mut x);
        assert_eq!(x, vec![0.0; 4]);

        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);

        let mut block = vec![0.0f32; 6];
        copy_bias_tpp(&[1.0, 2.0, 3.0], &mut block);
        assert_eq!(block, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let mut out = vec![0.0f32; 6];
        add_tpp(&block, &[1.0; 6], &mut out);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        add_assign_tpp(&mut out, &block);
        assert_eq!(out, vec![3.0, 5.0, 7.0, 3.0, 5.0, 7.0]);
    }
}
