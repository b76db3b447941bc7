//! Compressed sparse row matrices and the triplet text format.
//!
//! Triplet files start with a single header line `rows cols nnz`, followed by
//! one `row col value` line per stored entry (zero-based indices, values in
//! 17 significant digits).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` entries. Entries are sorted
    /// row-major; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::DimensionMismatch(format!("entry ({r}, {c}) outside {rows}x{cols}")));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self { rows, cols, indptr, indices, values })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect()).unwrap()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), entries).unwrap()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    /// Column indices and values stored in row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Same sparsity pattern with new stored values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::IndexMismatch { expected: self.nnz(), actual: values.len() });
        }
        Ok(Self { values, ..self.clone() })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn abs(&self) -> Self {
        self.map_values(f64::abs)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_values(|v| v * s)
    }

    /// Divides every row by its L1 norm. Empty rows stay empty.
    pub fn row_normalized_l1(&self) -> Self {
        let mut values = self.values.clone();
        for r in 0..self.rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let norm: f64 = values[span.clone()].iter().map(|v| v.abs()).sum();
            if norm > 0.0 {
                values[span].iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self { values, ..self.clone() }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_values_into(&self.values, x, out)
    }

    /// `out = M' * x` where `M'` has this pattern and the given values.
    pub fn matvec_values_into(&self, values: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.nnz());
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        let row_dot = |r: usize| {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += values[k] * x[self.indices[k]];
            }
            acc
        };
        par::fill_indexed(out, self.nnz() >= par::PAR_MIN_NNZ, row_dot);
    }

    /// Sequential product, used as the reference path in benchmarks.
    pub fn matvec_seq_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *o = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn write_triplets<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.rows, self.cols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r} {c} {v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_triplets<R: Read>(r: R, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("header: {e}")))?;
        let [rows, cols, nnz] = dims[..] else {
            return Err(bad(format!("header must be `rows cols nnz`, got `{header}`")));
        };
        let mut entries = Vec::with_capacity(nnz);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(r), Some(c), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad(format!("line {}: expected `row col value`", lineno + 2)));
            };
            let parse_err = |e: &dyn std::fmt::Display| bad(format!("line {}: {e}", lineno + 2));
            entries.push((
                r.parse().map_err(|e| parse_err(&e))?,
                c.parse().map_err(|e| parse_err(&e))?,
                v.parse().map_err(|e| parse_err(&e))?,
            ));
        }
        if entries.len() != nnz {
            return Err(bad(format!("header declares {nnz} entries, found {}", entries.len())));
        }
        Self::from_triplets(rows, cols, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_triplets(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_triplets(std::fs::File::open(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.triplets().collect::<Vec<_>>(), vec![(0, 1, 2.0), (1, 2, 1.5)]);
    }

    #[test]
    fn out_of_range_entry_is_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn row_normalization_leaves_empty_rows() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(0, 1, 1.0), (0, 2, 1.0), (2, 0, 1.0)]).unwrap();
        let n = m.row_normalized_l1();
        assert_eq!(n.row_sums(), vec![1.0, 0.0, 1.0]);
        assert_eq!(n.row(0).1, &[0.5, 0.5]);
    }

    #[test]
    fn matvec_matches_dense() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 1, -3.0)]).unwrap();
        let x = [0.5, 2.0];
        assert_eq!(m.matvec(&x), vec![4.5, -6.0]);
        let d = m.to_dense() * nalgebra::DVector::from_column_slice(&x);
        assert_eq!(d.as_slice(), &[4.5, -6.0]);
    }

    #[test]
    fn triplet_text_round_trip() {
        let m = CsrMatrix::from_triplets(3, 2, vec![(0, 1, 0.1), (2, 0, -1.0 / 3.0)]).unwrap();
        let mut buf = Vec::new();
        m.write_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3 2 2\n"));
        let back = CsrMatrix::read_triplets(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn malformed_triplets_are_rejected() {
        let err = CsrMatrix::read_triplets(&b"2 2 2\n0 0 1.0\n"[..], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = CsrMatrix::read_triplets(&b"2 2\n"[..], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
