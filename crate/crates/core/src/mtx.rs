//! Matrix Market (`coordinate`, `real` or `pattern`, `general`) reading and
//! writing, and random block-sparse matrix generation.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::microkernels::{BcscError, BcscMatrix};
use crate::tensor::{check_div, Matrix};
use crate::workload::{random_values, DataKind};

#[derive(Debug, Error)]
pub enum MtxError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Blocks(#[from] BcscError),
}

/// Coordinate-format matrix with 0-based indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CooMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f32)>,
}

impl CooMatrix {
    /// Duplicate coordinates are summed.
    pub fn to_dense(&self) -> Matrix<f32> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m.set(r, c, m.get(r, c) + v);
        }
        m
    }

    /// Bins entries into `bm x bk` blocks; a block is stored iff at least one
    /// entry falls in it, and its remaining values are zero.
    pub fn to_bcsc(&self, bm: usize, bk: usize) -> Result<BcscMatrix<f32>, MtxError> {
        check_div("rows", self.rows, bm).map_err(BcscError::from)?;
        check_div("cols", self.cols, bk).map_err(BcscError::from)?;
        let dense = self.to_dense();
        let kb = self.cols / bk;
        let mut present = vec![false; (self.rows / bm) * kb];
        for &(r, c, _) in &self.entries {
            present[(r / bm) * kb + c / bk] = true;
        }
        Ok(BcscMatrix::from_dense_masked(&dense, bm, bk, |r, c| present[r * kb + c])?)
    }

    /// Every value of every stored block, zeros included, so re-importing
    /// with the same block size reproduces the block structure.
    pub fn from_bcsc(a: &BcscMatrix<f32>) -> Self {
        let mut entries = Vec::new();
        for r in 0..a.block_rows() {
            for j in a.ptr[r]..a.ptr[r + 1] {
                let vals = a.block(j);
                let c0 = a.blk_idx[j] * a.bk;
                for i in 0..a.bm {
                    for p in 0..a.bk {
                        entries.push((r * a.bm + i, c0 + p, vals[p * a.bm + i]));
                    }
                }
            }
        }
        entries.sort_by_key(|&(r, c, _)| (c, r));
        CooMatrix { rows: a.m, cols: a.k, entries }
    }
}

pub fn parse_mtx(text: &str) -> Result<CooMatrix, MtxError> {
    let err = |line: usize, msg: String| MtxError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let h: Vec<String> = header.split_whitespace().map(|s| s.to_ascii_lowercase()).collect();
    if h.len() != 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" {
        return Err(err(ln, format!("not a Matrix Market header: '{header}'")));
    }
    if h[2] != "coordinate" {
        return Err(err(ln, format!("unsupported format '{}' (only coordinate)", h[2])));
    }
    let pattern = match h[3].as_str() {
        "real" => false,
        "pattern" => true,
        f => return Err(err(ln, format!("unsupported field '{f}' (real or pattern)"))),
    };
    if h[4] != "general" {
        return Err(err(ln, format!("unsupported symmetry '{}' (only general)", h[4])));
    }
    let mut data = lines.filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let (ln, size) = data.next().ok_or_else(|| err(ln + 1, "missing size line".into()))?;
    let nums: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(ln, format!("bad size entry '{t}'"))))
        .collect::<Result<_, _>>()?;
    let [rows, cols, nnz] = nums[..] else {
        return Err(err(ln, format!("size line needs 3 integers, got {}", nums.len())));
    };
    let mut entries = Vec::with_capacity(nnz);
    for (ln, l) in data {
        let t: Vec<&str> = l.split_whitespace().collect();
        let want = if pattern { 2 } else { 3 };
        if t.len() != want {
            return Err(err(ln, format!("expected {want} fields, got {}", t.len())));
        }
        let idx = |s: &str, n: usize, what: &str| -> Result<usize, MtxError> {
            match s.parse::<usize>() {
                Ok(v) if (1..=n).contains(&v) => Ok(v - 1),
                _ => Err(err(ln, format!("{what} index '{s}' outside 1..={n}"))),
            }
        };
        let r = idx(t[0], rows, "row")?;
        let c = idx(t[1], cols, "column")?;
        let v = if pattern {
            1.0
        } else {
            t[2].parse::<f32>().map_err(|_| err(ln, format!("bad value '{}'", t[2])))?
        };
        if entries.len() == nnz {
            return Err(err(ln, format!("more than the declared {nnz} entries")));
        }
        entries.push((r, c, v));
    }
    if entries.len() != nnz {
        return Err(err(text.lines().count(), format!("declared {nnz} entries, found {}", entries.len())));
    }
    Ok(CooMatrix { rows, cols, entries })
}

pub fn read_mtx(path: &Path) -> Result<CooMatrix, MtxError> {
    parse_mtx(&std::fs::read_to_string(path)?)
}

/// Reads a Matrix Market file straight into block-sparse form.
pub fn mtx_import(path: &Path, bm: usize, bk: usize) -> Result<BcscMatrix<f32>, MtxError> {
    read_mtx(path)?.to_bcsc(bm, bk)
}

pub fn format_mtx(m: &CooMatrix) -> String {
    let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
    let _ = writeln!(s, "{} {} {}", m.rows, m.cols, m.entries.len());
    for &(r, c, v) in &m.entries {
        let _ = writeln!(s, "{} {} {}", r + 1, c + 1, v);
    }
    s
}

pub fn write_mtx(path: &Path, m: &CooMatrix) -> Result<(), MtxError> {
    std::fs::write(path, format_mtx(m))?;
    Ok(())
}

/// Random block-sparse matrix: each block is kept with probability
/// `density`, then filled from `kind`.
pub fn gen_block_sparse(
    m: usize,
    k: usize,
    bm: usize,
    bk: usize,
    density: f64,
    seed: u64,
    kind: DataKind,
) -> Result<BcscMatrix<f32>, MtxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mb, kb) = (m / bm.max(1), k / bk.max(1));
    let mask: Vec<bool> = (0..mb * kb).map(|_| rng.gen_bool(density.clamp(0.0, 1.0))).collect();
    let dense = Matrix { rows: m, cols: k, data: random_values(&mut rng, m * k, kind) };
    Ok(BcscMatrix::from_dense_masked(&dense, bm, bk, |r, c| mask[r * kb + c])?)
}
