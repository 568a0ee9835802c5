//! Small dense/sparse matrix helpers used by the chain constructions.
//!
//! Matrices are stored row-major because almost every consumer walks rows
//! (sampling, row-sum checks, sparse products). Linear solves go through
//! `nalgebra`'s LU.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on row sums applied when a stochastic matrix is constructed.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((r, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {r} has {} entries, expected {cols}",
                row.len()
            )));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }

    pub fn matmul(&self, other: &RowMatrix) -> Result<RowMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = RowMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(r)) {
                *o += w * p;
            }
        }
        out
    }

    /// Matrix times column vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scaled(&self, s: f64) -> RowMatrix {
        RowMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &RowMatrix) -> Result<RowMatrix> {
        self.check_same_shape(other)?;
        Ok(RowMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// `(1 - w) * self + w * other`.
    pub fn convex(&self, other: &RowMatrix, w: f64) -> Result<RowMatrix> {
        self.check_same_shape(other)?;
        Ok(RowMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &RowMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    fn check_same_shape(&self, other: &RowMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Outcome of checking that a matrix is row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: usize,
    pub cols: usize,
    /// Largest `|sum(row) - 1|` over all rows.
    pub max_row_deviation: f64,
    /// Rows whose sum is off by more than [`ROW_SUM_TOL`], with their deviation.
    pub bad_rows: Vec<(usize, f64)>,
    pub negative_entries: Vec<(usize, usize)>,
    pub above_one_entries: Vec<(usize, usize)>,
    pub nan_entries: Vec<(usize, usize)>,
}

impl ValidationReport {
    pub fn passes(&self) -> bool {
        self.bad_rows.is_empty()
            && self.negative_entries.is_empty()
            && self.above_one_entries.is_empty()
            && self.nan_entries.is_empty()
            && self.rows > 0
            && self.cols > 0
    }

    pub fn summary(&self) -> String {
        if self.passes() {
            return "ok".to_string();
        }
        let mut parts = Vec::new();
        if self.rows == 0 || self.cols == 0 {
            parts.push("empty matrix".to_string());
        }
        if let Some((r, d)) = self.bad_rows.first() {
            parts.push(format!(
                "{} rows do not sum to 1 (row {r} off by {d:e})",
                self.bad_rows.len()
            ));
        }
        if let Some((r, c)) = self.negative_entries.first() {
            parts.push(format!("negative entry at ({r},{c})"));
        }
        if let Some((r, c)) = self.above_one_entries.first() {
            parts.push(format!("entry above 1 at ({r},{c})"));
        }
        if let Some((r, c)) = self.nan_entries.first() {
            parts.push(format!("non-finite entry at ({r},{c})"));
        }
        parts.join("; ")
    }
}

pub fn validate_stochastic(m: &RowMatrix) -> ValidationReport {
    let mut report = ValidationReport {
        rows: m.rows(),
        cols: m.cols(),
        max_row_deviation: 0.0,
        bad_rows: Vec::new(),
        negative_entries: Vec::new(),
        above_one_entries: Vec::new(),
        nan_entries: Vec::new(),
    };
    for r in 0..m.rows() {
        let mut sum = 0.0;
        for (c, &x) in m.row(r).iter().enumerate() {
            if !x.is_finite() {
                report.nan_entries.push((r, c));
                continue;
            }
            if x < 0.0 {
                report.negative_entries.push((r, c));
            } else if x > 1.0 {
                report.above_one_entries.push((r, c));
            }
            sum += x;
        }
        let dev = (sum - 1.0).abs();
        if dev.is_nan() {
            continue;
        }
        report.max_row_deviation = report.max_row_deviation.max(dev);
        if dev > ROW_SUM_TOL {
            report.bad_rows.push((r, dev));
        }
    }
    report
}

pub(crate) fn ensure_stochastic(what: &'static str, m: &RowMatrix) -> Result<()> {
    let report = validate_stochastic(m);
    if report.passes() {
        Ok(())
    } else {
        Err(Error::invalid(what, report.summary()))
    }
}

/// Solves `(I - scale * a) x = b`.
pub fn solve_shifted(a: &RowMatrix, scale: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut lhs = a.to_dmatrix() * (-scale);
    for i in 0..n {
        lhs[(i, i)] += 1.0;
    }
    solve(lhs, b)
}

pub fn solve(lhs: DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = lhs.nrows();
    let rhs = DVector::from_column_slice(b);
    lhs.lu()
        .solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Singular(format!("{n}x{n} system")))
}

/// Inverse of `I - scale * a`.
pub fn inverse_shifted(a: &RowMatrix, scale: f64) -> Result<RowMatrix> {
    let n = a.rows();
    let mut lhs = a.to_dmatrix() * (-scale);
    for i in 0..n {
        lhs[(i, i)] += 1.0;
    }
    lhs.try_inverse()
        .map(|m| RowMatrix::from_dmatrix(&m))
        .ok_or_else(|| Error::Singular(format!("{n}x{n} system")))
}

/// Sparse row-stochastic kernel in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    dim: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseKernel {
    /// Builds from per-row `(column, probability)` lists; zeros are dropped.
    pub fn from_rows(dim: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != dim {
            return Err(Error::Dimension(format!("{} rows for dimension {dim}", rows.len())));
        }
        let mut offsets = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for row in rows {
            for (c, v) in row {
                if c >= dim {
                    return Err(Error::Dimension(format!("column {c} out of range {dim}")));
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            dim,
            offsets,
            cols,
            vals,
        })
    }

    pub fn from_dense(m: &RowMatrix) -> Self {
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self::from_rows(m.rows(), rows).expect("square input")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> RowMatrix {
        let mut m = RowMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                m.set(r, c, m.get(r, c) + v);
            }
        }
        m
    }

    /// Row vector times kernel.
    pub fn left_mul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &w) in v.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (c, p) in self.row(r) {
                out[c] += w * p;
            }
        }
    }
}

/// Whether some column of `P^k` is strictly positive in every row for large
/// enough `k` — i.e. a single aperiodic recurrent class reachable from
/// everywhere. Decided exactly on the zero pattern by repeated boolean
/// squaring up to the Wielandt bound `(d-1)^2 + 1`.
pub fn has_ergodic_pattern(p: &RowMatrix) -> bool {
    let d = p.rows();
    if d == 0 {
        return false;
    }
    let words = d.div_ceil(64);
    let mut pattern: Vec<Vec<u64>> = (0..d)
        .map(|r| {
            let mut bits = vec![0u64; words];
            for (c, &v) in p.row(r).iter().enumerate() {
                if v > 0.0 {
                    bits[c / 64] |= 1 << (c % 64);
                }
            }
            bits
        })
        .collect();
    let target = (d - 1) * (d - 1) + 1;
    let mut power = 1usize;
    loop {
        if common_column(&pattern, words) {
            return true;
        }
        if power >= target {
            return false;
        }
        pattern = bool_square(&pattern, words);
        power *= 2;
    }
}

fn common_column(pattern: &[Vec<u64>], words: usize) -> bool {
    let mut acc = vec![u64::MAX; words];
    for row in pattern {
        for (a, b) in acc.iter_mut().zip(row) {
            *a &= b;
        }
    }
    acc.iter().any(|&w| w != 0)
}

fn bool_square(pattern: &[Vec<u64>], words: usize) -> Vec<Vec<u64>> {
    pattern
        .iter()
        .map(|row| {
            let mut out = vec![0u64; words];
            for (w, &bits) in row.iter().enumerate() {
                let mut bits = bits;
                while bits != 0 {
                    let k = w * 64 + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    for (o, s) in out.iter_mut().zip(&pattern[k]) {
                        *o |= s;
                    }
                }
            }
            out
        })
        .collect()
}
