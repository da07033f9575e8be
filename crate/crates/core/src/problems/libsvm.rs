//! LibSVM sparse text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ProblemError;

/// Sparse rows stored in compressed-row form with labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    labels: Vec<f64>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

/// One row as parallel index and value slices (0-based indices).
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub label: f64,
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl Row<'_> {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices.iter().zip(self.values).map(|(&j, &v)| v * x[j as usize]).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `out += c * a`.
    pub fn axpy(&self, c: f64, out: &mut [f64]) {
        for (&j, &v) in self.indices.iter().zip(self.values) {
            out[j as usize] += c * v;
        }
    }
}

impl SparseDataset {
    /// Builds a dataset from `(label, [(index, value)])` rows with 0-based,
    /// strictly increasing indices and labels already in {-1, +1}.
    pub fn from_rows(rows: Vec<(f64, Vec<(u32, f64)>)>, dim: Option<usize>) -> Result<Self, ProblemError> {
        let mut ds = SparseDataset { labels: Vec::new(), indptr: vec![0], indices: Vec::new(), values: Vec::new(), dim: 0 };
        let mut max_index = 0usize;
        for (line, (label, feats)) in rows.into_iter().enumerate() {
            if label != 1.0 && label != -1.0 {
                return Err(ProblemError::Parse { line: line + 1, message: format!("label {label} is not -1 or +1") });
            }
            let mut prev: Option<u32> = None;
            for (j, v) in feats {
                if prev.is_some_and(|p| j <= p) {
                    return Err(ProblemError::Parse { line: line + 1, message: format!("index {} is not increasing", j + 1) });
                }
                prev = Some(j);
                max_index = max_index.max(j as usize + 1);
                ds.indices.push(j);
                ds.values.push(v);
            }
            ds.labels.push(label);
            ds.indptr.push(ds.indices.len());
        }
        ds.dim = resolve_dim(max_index, dim)?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> Row<'_> {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        Row { label: self.labels[i], indices: &self.indices[a..b], values: &self.values[a..b] }
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// SHA-256 over the LibSVM serialization of rows `[0, rows)` and the
    /// dimension, hex encoded.
    pub fn content_hash(&self, rows: usize) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for i in 0..rows.min(self.len()) {
            let row = self.row(i);
            h.update(row.label.to_le_bytes());
            for (&j, &v) in row.indices.iter().zip(row.values) {
                h.update(j.to_le_bytes());
                h.update(v.to_le_bytes());
            }
            h.update(u32::MAX.to_le_bytes());
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn resolve_dim(max_index: usize, dim: Option<usize>) -> Result<usize, ProblemError> {
    match dim {
        Some(d) if d < max_index => Err(ProblemError::InvalidInput(format!(
            "dimension override {d} is smaller than the largest index {max_index}"
        ))),
        Some(d) => Ok(d),
        None => Ok(max_index),
    }
}

/// Parses LibSVM text. Labels are normalized to {-1, +1}: a label set that
/// is already a subset of {-1, +1} is kept, otherwise the two distinct labels
/// are sorted and the smaller maps to +1.
pub fn parse_libsvm(text: &str, dim: Option<usize>) -> Result<SparseDataset, ProblemError> {
    let mut raw_labels = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ProblemError::Parse { line: lineno + 1, message };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line");
        let label: f64 = label_tok.parse().map_err(|_| err(format!("label {label_tok:?} is not numeric")))?;
        if !label.is_finite() {
            return Err(err(format!("label {label_tok:?} is not finite")));
        }
        let mut feats = Vec::new();
        let mut prev = 0u64;
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| err(format!("token {tok:?} is not index:value")))?;
            let i: u64 = i.parse().map_err(|_| err(format!("index {i:?} is not a positive integer")))?;
            let v: f64 = v.parse().map_err(|_| err(format!("value {v:?} is not numeric")))?;
            if i == 0 || i > u32::MAX as u64 {
                return Err(err(format!("index {i} out of range (indices are 1-based)")));
            }
            if i <= prev {
                return Err(err(format!("index {i} is not greater than previous index {prev}")));
            }
            if !v.is_finite() {
                return Err(err(format!("value {v} at index {i} is not finite")));
            }
            prev = i;
            feats.push(((i - 1) as u32, v));
        }
        raw_labels.push((lineno + 1, label));
        rows.push((label, feats));
    }

    let mut distinct: Vec<f64> = raw_labels.iter().map(|&(_, l)| l).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let already_signed = distinct.iter().all(|&l| l == 1.0 || l == -1.0);
    if !already_signed && distinct.len() > 2 {
        let line = raw_labels.iter().find(|&&(_, l)| l == distinct[2]).map_or(0, |&(n, _)| n);
        return Err(ProblemError::Parse {
            line,
            message: format!("more than two classes: {distinct:?}"),
        });
    }
    for row in &mut rows {
        if !already_signed {
            row.0 = if row.0 == distinct[0] { 1.0 } else { -1.0 };
        }
    }
    let ds = SparseDataset::from_rows(rows, None)?;
    Ok(SparseDataset { dim: resolve_dim(ds.dim, dim)?, ..ds })
}

pub fn load_libsvm(path: &Path, dim: Option<usize>) -> Result<SparseDataset, ProblemError> {
    let text = fs::read_to_string(path).map_err(|e| ProblemError::Io { path: path.display().to_string(), source: e })?;
    parse_libsvm(&text, dim)
}

/// Writes rows back out in LibSVM form with `+1`/`-1` labels and 1-based
/// indices. Values use the shortest representation that parses back
/// exactly.
pub fn to_libsvm_string(ds: &SparseDataset) -> String {
    let mut out = String::new();
    for row in ds.rows() {
        out.push_str(if row.label > 0.0 { "+1" } else { "-1" });
        for (&j, &v) in row.indices.iter().zip(row.values) {
            let _ = write!(out, " {}:{v:?}", j + 1);
        }
        out.push('\n');
    }
    out
}
