//! Dense matrices, blocked tensor layouts and VNNI packing.
//!
//! Blocked layouts store a logical 2D matrix as a grid of small contiguous
//! blocks so each micro-kernel operand is one contiguous run:
//!
//! | layout      | logical  | storage                 |
//! |-------------|----------|-------------------------|
//! | `ABlocked`  | `M x K`  | `[Mb][Kb][bk][bm]`      |
//! | `BBlocked`  | `K x N`  | `[Nb][Kb][bn][bk]`      |
//! | `CBlocked`  | `M x N`  | `[Nb][Mb][bn][bm]`      |
//! | `Vnni`      | `R x N`  | `[Nb][R/v][bn][v]`      |
//!
//! `CBlocked{bm, bn}` and `BBlocked{bk: bm, bn}` share one formula, so a GEMM
//! output feeds the next GEMM as its `B` operand without repacking.

use std::marker::PhantomData;

use thiserror::Error;

use crate::bf16::Bf16;

/// Storage type of tensor elements. Arithmetic is always done in `f32`.
pub trait Element: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const NAME: &'static str;
    fn to_f32(self) -> f32;
    fn from_f32(x: f32) -> Self;
}

impl Element for f32 {
    const NAME: &'static str = "fp32";
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Element for Bf16 {
    const NAME: &'static str = "bf16";
    #[inline(always)]
    fn to_f32(self) -> f32 {
        Bf16::to_f32(self)
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        Bf16::from_f32(x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{what}: dimension {dim} is not a multiple of block {block}")]
    NotDivisible { what: &'static str, dim: usize, block: usize },
    #[error("{what}: expected {expected} elements, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    Mismatch(String),
}

pub(crate) fn check_div(what: &'static str, dim: usize, block: usize) -> Result<(), ShapeError> {
    if block == 0 || dim % block != 0 {
        return Err(ShapeError::NotDivisible { what, dim, block });
    }
    Ok(())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    ABlocked { bm: usize, bk: usize },
    BBlocked { bk: usize, bn: usize },
    CBlocked { bm: usize, bn: usize },
    Vnni { bn: usize, v: usize },
}

impl Layout {
    /// Row and column block sizes.
    fn blocks(self) -> (usize, usize) {
        match self {
            Layout::ABlocked { bm, bk } => (bm, bk),
            Layout::BBlocked { bk, bn } => (bk, bn),
            Layout::CBlocked { bm, bn } => (bm, bn),
            Layout::Vnni { bn, v } => (v, bn),
        }
    }

    pub fn check(self, rows: usize, cols: usize) -> Result<(), ShapeError> {
        let (rb, cb) = self.blocks();
        check_div("rows", rows, rb)?;
        check_div("cols", cols, cb)
    }

    /// Storage offset of logical element `(r, c)` in a `rows x cols` matrix.
    #[inline]
    pub fn offset(self, rows: usize, cols: usize, r: usize, c: usize) -> usize {
        match self {
            Layout::ABlocked { bm, bk } => {
                let kb = cols / bk;
                ((r / bm) * kb + c / bk) * bk * bm + (c % bk) * bm + r % bm
            }
            Layout::BBlocked { bk, bn } => {
                let kb = rows / bk;
                ((c / bn) * kb + r / bk) * bn * bk + (c % bn) * bk + r % bk
            }
            Layout::CBlocked { bm, bn } => {
                let mb = rows / bm;
                ((c / bn) * mb + r / bm) * bn * bm + (c % bn) * bm + r % bm
            }
            Layout::Vnni { bn, v } => (c / bn) * rows * bn + (r / v) * bn * v + (c % bn) * v + r % v,
        }
    }
}

/// A logical matrix stored in one of the blocked layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedTensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Element> BlockedTensor<T> {
    pub fn zeros(rows: usize, cols: usize, layout: Layout) -> Result<Self, ShapeError> {
        layout.check(rows, cols)?;
        Ok(BlockedTensor { rows, cols, layout, data: vec![T::default(); rows * cols] })
    }

    pub fn from_matrix(m: &Matrix<T>, layout: Layout) -> Result<Self, ShapeError> {
        let mut t = Self::zeros(m.rows, m.cols, layout)?;
        for r in 0..m.rows {
            for c in 0..m.cols {
                let o = layout.offset(m.rows, m.cols, r, c);
                t.data[o] = m.get(r, c);
            }
        }
        Ok(t)
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[self.layout.offset(self.rows, self.cols, r, c)]
    }

    pub fn convert<U: Element>(&self) -> BlockedTensor<U> {
        BlockedTensor {
            rows: self.rows,
            cols: self.cols,
            layout: self.layout,
            data: self.data.iter().map(|&x| U::from_f32(x.to_f32())).collect(),
        }
    }
}

/// A `K x N` operand packed as `[Nb][K/v][bn][v]`.
pub type VnniTensor<T> = BlockedTensor<T>;

/// Packs a row-major `K x N` matrix into VNNI layout with `bn`-wide column
/// blocks and `v` consecutive reduction rows interleaved innermost.
pub fn pack_vnni<T: Element>(m: &Matrix<T>, bn: usize, v: usize) -> Result<VnniTensor<T>, ShapeError> {
    BlockedTensor::from_matrix(m, Layout::Vnni { bn, v })
}

pub fn unpack_vnni<T: Element>(t: &VnniTensor<T>) -> Matrix<T> {
    t.to_matrix()
}

/// Shared handle to an output buffer written concurrently in disjoint
/// regions by several workers.
pub struct SharedMut<'a, T> {
    ptr: *mut T,
    len: usize,
    _marker: PhantomData<&'a mut [T]>,
}

unsafe impl<T: Send> Send for SharedMut<'_, T> {}
unsafe impl<T: Send> Sync for SharedMut<'_, T> {}

impl<'a, T> SharedMut<'a, T> {
    pub fn new(data: &'a mut [T]) -> Self {
        SharedMut { ptr: data.as_mut_ptr(), len: data.len(), _marker: PhantomData }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// # Safety
    /// No other live reference may overlap `offset..offset + len`.
    #[inline]
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn slice_mut(&self, offset: usize, len: usize) -> &mut [T] {
        assert!(offset + len <= self.len, "slice {offset}+{len} out of {}", self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(offset), len)
    }

    /// # Safety
    /// No live mutable reference may overlap `offset..offset + len`.
    #[inline]
    pub unsafe fn slice(&self, offset: usize, len: usize) -> &[T] {
        assert!(offset + len <= self.len, "slice {offset}+{len} out of {}", self.len);
        std::slice::from_raw_parts(self.ptr.add(offset), len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |r, c| (r * cols + c) as f32)
    }

    #[test]
    fn vnni_v1_single_block_is_identity() {
        let m = ramp(4, 6);
        let t = pack_vnni(&m, 6, 1).unwrap();
        assert_eq!(t.data, m.data);
    }

    #[test]
    fn vnni_v2_ramp() {
        // index map: (k, n) -> (k/2)*bn*2 + n*2 + k%2 with one column block
        let m = ramp(4, 4);
        let t = pack_vnni(&m, 4, 2).unwrap();
        let expected: Vec<f32> = vec![
            0., 4., 1., 5., 2., 6., 3., 7., //
            8., 12., 9., 13., 10., 14., 11., 15.,
        ];
        assert_eq!(t.data, expected);
        assert_eq!(unpack_vnni(&t), m);
    }

    #[test]
    fn c_layout_matches_b_layout() {
        let m = ramp(8, 12);
        let c = BlockedTensor::from_matrix(&m, Layout::CBlocked { bm: 4, bn: 3 }).unwrap();
        let b = BlockedTensor::from_matrix(&m, Layout::BBlocked { bk: 4, bn: 3 }).unwrap();
        assert_eq!(c.data, b.data);
    }

    #[test]
    fn a_block_is_column_major() {
        let m = ramp(4, 4);
        let a = BlockedTensor::from_matrix(&m, Layout::ABlocked { bm: 2, bk: 2 }).unwrap();
        // block (0,0) holds rows 0..2, cols 0..2 with rows fastest
        assert_eq!(&a.data[..4], &[0., 4., 1., 5.]);
        // next block along K is (0, 1)
        assert_eq!(&a.data[4..8], &[2., 6., 3., 7.]);
    }

    #[test]
    fn rejects_ragged_blocks() {
        assert!(BlockedTensor::<f32>::zeros(10, 8, Layout::ABlocked { bm: 4, bk: 4 }).is_err());
        assert!(pack_vnni(&ramp(3, 4), 4, 2).is_err());
    }

    fn layouts() -> impl Strategy<Value = (usize, usize, Layout)> {
        (1usize..4, 1usize..4, 1usize..5, 1usize..5, 0usize..4).prop_map(|(rb, cb, br, bc, kind)| {
            let layout = match kind {
                0 => Layout::ABlocked { bm: br, bk: bc },
                1 => Layout::BBlocked { bk: br, bn: bc },
                2 => Layout::CBlocked { bm: br, bn: bc },
                _ => Layout::Vnni { v: br, bn: bc },
            };
            (rb * br, cb * bc, layout)
        })
    }

    proptest! {
        #[test]
        fn layouts_are_bijections((rows, cols, layout) in layouts(), seed in any::<u32>()) {
            let m = Matrix::from_fn(rows, cols, |r, c| ((r * 31 + c * 7) as u32 ^ seed) as f32);
            let t = BlockedTensor::from_matrix(&m, layout).unwrap();
            let mut offsets: Vec<usize> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| layout.offset(rows, cols, r, c)))
                .collect();
            offsets.sort();
            prop_assert_eq!(offsets, (0..rows * cols).collect::<Vec<_>>());
            prop_assert_eq!(t.to_matrix(), m);
        }
    }
}
