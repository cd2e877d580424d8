//! Condensed storage and multiplication kernel for constant fan-in matrices.
//!
//! An `n x d` weight matrix in which every active row holds exactly `k`
//! non-zeros is stored as two `n x k` planes: one with the non-zero values
//! and one with their column indices. The product `W v` then becomes a sum
//! of `k` gather-multiply-accumulate passes,
//!
//! ```text
//! W v = sum_a  values[:, a] .* v[col_indices[:, a]]      a = 0..k
//! ```
//!
//! which touches `n * k` weights instead of `n * d`. The dense masked
//! counterpart [`DenseMaskedMatrix`] serves as the validation oracle.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::dense::DenseMatrix;
use crate::scalar::Scalar;

/// Magic bytes of the flat binary layout.
pub const MAGIC: [u8; 4] = *b"CFIN";
/// Current version of the flat binary layout.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CondensedError {
    /// An active row's non-zero count differs from the layer fan-in.
    #[error("non-uniform fan-in: row {row} has {got} non-zeros, expected {expected}")]
    NonUniformFanIn {
        row: usize,
        got: usize,
        expected: usize,
    },
    /// A stored column index falls outside `[0, dense_cols)` or breaks the
    /// strictly-increasing order within its row.
    #[error("index out of range at row {row}: column {col} (dense_cols = {dense_cols})")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        dense_cols: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    /// An inactive row carries a non-zero value.
    #[error("inactive row {row} has non-zero stored values")]
    InactiveRowNonzero { row: usize },
    #[error("fan-in {fan_in} exceeds dense column count {dense_cols}")]
    FanInExceedsCols { fan_in: usize, dense_cols: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense weights plus boolean mask; the oracle counterpart of
/// [`CondensedMatrix`].
///
/// A row with at least one mask bit set is *active*; rows whose mask is all
/// zero are considered ablated. Every active row must carry the same number
/// of mask bits. Weights at masked-off positions are normalized to exact
/// zero on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMaskedMatrix<T> {
    weights: DenseMatrix<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> DenseMaskedMatrix<T> {
    /// Builds a masked matrix, zeroing weights wherever the mask is off.
    ///
    /// The constant fan-in property is *not* required here; it is checked by
    /// [`CondensedMatrix::from_dense`].
    pub fn new(mut weights: DenseMatrix<T>, mask: Vec<bool>) -> Result<Self, CondensedError> {
        if mask.len() != weights.rows() * weights.cols() {
            return Err(CondensedError::DimensionMismatch {
                expected: weights.rows() * weights.cols(),
                got: mask.len(),
            });
        }
        for (w, &m) in weights.as_mut_slice().iter_mut().zip(&mask) {
            if !m {
                *w = T::zero();
            }
        }
        Ok(Self { weights, mask })
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.weights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn mask_at(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.weights.cols() + j]
    }

    fn row_popcount(&self, i: usize) -> usize {
        let c = self.weights.cols();
        self.mask[i * c..(i + 1) * c].iter().filter(|&&m| m).count()
    }

    /// Masked product with a vector of length `cols`.
    ///
    /// This is the reference path: a plain row-major accumulation over the
    /// dense shape with masked-off weights stored as exact zeros.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>, CondensedError> {
        if v.len() != self.cols() {
            return Err(CondensedError::DimensionMismatch {
                expected: self.cols(),
                got: v.len(),
            });
        }
        let mut out = vec![T::zero(); self.rows()];
        for i in 0..self.rows() {
            let mut acc = T::zero();
            for (j, &w) in self.weights.row(i).iter().enumerate() {
                if self.mask[i * self.cols() + j] {
                    acc += w * v[j];
                }
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Masked product with a `cols x b` matrix.
    pub fn matmul(&self, v: &DenseMatrix<T>) -> Result<DenseMatrix<T>, CondensedError> {
        if v.rows() != self.cols() {
            return Err(CondensedError::DimensionMismatch {
                expected: self.cols(),
                got: v.rows(),
            });
        }
        Ok(self.weights.matmul(v))
    }
}

/// Constant fan-in matrix in condensed two-plane storage.
///
/// Planes are stored column-major over the fan-in axis (`k` planes of length
/// `n`), matching the gather-pass formulation of the kernel. Ablated rows
/// stay in storage, flagged inactive, with zero values and canonical indices
/// `0..k`, so row numbering is stable across topology updates.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedMatrix<T> {
    rows: usize,
    dense_cols: usize,
    fan_in: usize,
    /// `values[a * rows + i]` is the `a`-th stored weight of row `i`.
    values: Vec<T>,
    /// Same layout as `values`; strictly increasing along `a` for active rows.
    col_indices: Vec<u32>,
    active_rows: Vec<bool>,
}

impl<T: Scalar> CondensedMatrix<T> {
    /// Condenses a masked dense matrix.
    ///
    /// The fan-in is the maximum row popcount of the mask; every row must
    /// have either exactly that popcount (active) or zero (ablated).
    pub fn from_dense(masked: &DenseMaskedMatrix<T>) -> Result<Self, CondensedError> {
        let n = masked.rows();
        let d = masked.cols();
        let popcounts: Vec<usize> = (0..n).map(|i| masked.row_popcount(i)).collect();
        let k = popcounts.iter().copied().max().unwrap_or(0);
        for (row, &p) in popcounts.iter().enumerate() {
            if p != 0 && p != k {
                return Err(CondensedError::NonUniformFanIn {
                    row,
                    got: p,
                    expected: k,
                });
            }
        }

        let mut values = vec![T::zero(); n * k];
        let mut col_indices = vec![0u32; n * k];
        let mut active_rows = vec![false; n];
        for i in 0..n {
            if popcounts[i] == 0 {
                // canonical inactive row: zero values, indices 0..k
                for a in 0..k {
                    col_indices[a * n + i] = a as u32;
                }
                continue;
            }
            active_rows[i] = true;
            let mut a = 0;
            for j in 0..d {
                if masked.mask_at(i, j) {
                    values[a * n + i] = masked.weights().at(i, j);
                    col_indices[a * n + i] = j as u32;
                    a += 1;
                }
            }
        }
        Ok(Self {
            rows: n,
            dense_cols: d,
            fan_in: k,
            values,
            col_indices,
            active_rows,
        })
    }

    /// Builds from row-major planes, validating every invariant.
    ///
    /// `values` and `col_indices` are `n x k` row-major (row `i`'s entries
    /// contiguous). Active rows must have strictly increasing in-range
    /// indices; inactive rows must be all-zero valued and are canonicalized.
    pub fn from_parts(
        rows: usize,
        dense_cols: usize,
        fan_in: usize,
        values_rm: &[T],
        col_indices_rm: &[u32],
        active_rows: Vec<bool>,
    ) -> Result<Self, CondensedError> {
        if fan_in > dense_cols {
            return Err(CondensedError::FanInExceedsCols {
                fan_in,
                dense_cols,
            });
        }
        let expected = rows * fan_in;
        if values_rm.len() != expected {
            return Err(CondensedError::DimensionMismatch {
                expected,
                got: values_rm.len(),
            });
        }
        if col_indices_rm.len() != expected {
            return Err(CondensedError::DimensionMismatch {
                expected,
                got: col_indices_rm.len(),
            });
        }
        if active_rows.len() != rows {
            return Err(CondensedError::DimensionMismatch {
                expected: rows,
                got: active_rows.len(),
            });
        }

        let mut values = vec![T::zero(); expected];
        let mut col_indices = vec![0u32; expected];
        for i in 0..rows {
            if active_rows[i] {
                let mut prev: Option<u32> = None;
                for a in 0..fan_in {
                    let c = col_indices_rm[i * fan_in + a];
                    let in_order = prev.map_or(true, |p| c > p);
                    if c as usize >= dense_cols || !in_order {
                        return Err(CondensedError::IndexOutOfRange {
                            row: i,
                            col: c as usize,
                            dense_cols,
                        });
                    }
                    prev = Some(c);
                    values[a * rows + i] = values_rm[i * fan_in + a];
                    col_indices[a * rows + i] = c;
                }
            } else {
                for a in 0..fan_in {
                    if values_rm[i * fan_in + a] != T::zero() {
                        return Err(CondensedError::InactiveRowNonzero { row: i });
                    }
                    col_indices[a * rows + i] = a as u32;
                }
            }
        }
        Ok(Self {
            rows,
            dense_cols,
            fan_in,
            values,
            col_indices,
            active_rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dense_cols(&self) -> usize {
        self.dense_cols
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn active_rows(&self) -> &[bool] {
        &self.active_rows
    }

    pub fn n_active(&self) -> usize {
        self.active_rows.iter().filter(|&&a| a).count()
    }

    /// Stored entries of one active row as `(column, value)` pairs.
    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (u32, T)> + '_ {
        (0..self.fan_in).map(move |a| (self.col_indices[a * self.rows + i], self.values[a * self.rows + i]))
    }

    /// Expands back to the dense masked form.
    pub fn to_dense(&self) -> DenseMaskedMatrix<T> {
        let n = self.rows;
        let d = self.dense_cols;
        let mut weights = DenseMatrix::zeros(n, d);
        let mut mask = vec![false; n * d];
        for i in 0..n {
            if !self.active_rows[i] {
                continue;
            }
            for (c, v) in self.row_entries(i) {
                weights.set(i, c as usize, v);
                mask[i * d + c as usize] = true;
            }
        }
        DenseMaskedMatrix::new(weights, mask).expect("shapes are consistent by construction")
    }

    /// Condensed product with a vector of length `dense_cols`.
    ///
    /// Runs `fan_in` gather passes in ascending plane order; inactive rows
    /// are forced to exact zero after the passes.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>, CondensedError> {
        if v.len() != self.dense_cols {
            return Err(CondensedError::DimensionMismatch {
                expected: self.dense_cols,
                got: v.len(),
            });
        }
        let n = self.rows;
        let mut out = vec![T::zero(); n];
        for a in 0..self.fan_in {
            let vals = &self.values[a * n..(a + 1) * n];
            let idx = &self.col_indices[a * n..(a + 1) * n];
            for i in 0..n {
                out[i] += vals[i] * v[idx[i] as usize];
            }
        }
        for (o, &act) in out.iter_mut().zip(&self.active_rows) {
            if !act {
                *o = T::zero();
            }
        }
        Ok(out)
    }

    /// Condensed product with a `dense_cols x b` matrix; column `j` of the
    /// result equals `matvec` on column `j` of `v`.
    pub fn matmul(&self, v: &DenseMatrix<T>) -> Result<DenseMatrix<T>, CondensedError> {
        if v.rows() != self.dense_cols {
            return Err(CondensedError::DimensionMismatch {
                expected: self.dense_cols,
                got: v.rows(),
            });
        }
        let n = self.rows;
        let b = v.cols();
        let mut out = DenseMatrix::zeros(n, b);
        for a in 0..self.fan_in {
            let vals = &self.values[a * n..(a + 1) * n];
            let idx = &self.col_indices[a * n..(a + 1) * n];
            for i in 0..n {
                let w = vals[i];
                let src = v.row(idx[i] as usize);
                let dst = out.row_mut(i);
                for c in 0..b {
                    dst[c] += w * src[c];
                }
            }
        }
        for i in 0..n {
            if !self.active_rows[i] {
                out.row_mut(i).fill(T::zero());
            }
        }
        Ok(out)
    }
}

impl CondensedMatrix<f32> {
    /// Writes the flat binary layout:
    /// magic `CFIN`, version/u32, then `n`, `d`, `k` as u64, all little
    /// endian; the column-index plane as u32 row-major; the value plane as
    /// f32 row-major; finally the active-row bitmap (LSB-first bits,
    /// `ceil(n/8)` bytes).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CondensedError> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dense_cols as u64).to_le_bytes())?;
        w.write_all(&(self.fan_in as u64).to_le_bytes())?;
        for i in 0..self.rows {
            for a in 0..self.fan_in {
                w.write_all(&self.col_indices[a * self.rows + i].to_le_bytes())?;
            }
        }
        for i in 0..self.rows {
            for a in 0..self.fan_in {
                w.write_all(&self.values[a * self.rows + i].to_le_bytes())?;
            }
        }
        let mut bitmap = vec![0u8; self.rows.div_ceil(8)];
        for (i, &act) in self.active_rows.iter().enumerate() {
            if act {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bitmap)?;
        Ok(())
    }

    /// Reads and validates the flat binary layout written by [`write_to`].
    ///
    /// [`write_to`]: CondensedMatrix::write_to
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CondensedError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(CondensedError::InvalidHeader(format!(
                "bad magic {magic:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(CondensedError::InvalidHeader(format!(
                "unsupported version {version}"
            )));
        }
        let n = read_u64(r)? as usize;
        let d = read_u64(r)? as usize;
        let k = read_u64(r)? as usize;

        let mut col_indices = vec![0u32; n * k];
        for x in col_indices.iter_mut() {
            *x = read_u32(r)?;
        }
        let mut values = vec![0f32; n * k];
        for x in values.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *x = f32::from_le_bytes(buf);
        }
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bitmap)?;
        let active: Vec<bool> = (0..n).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();

        Self::from_parts(n, d, k, &values, &col_indices, active)
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
