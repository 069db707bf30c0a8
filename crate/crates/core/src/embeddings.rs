//! Dense embedding vectors, stacked embedding matrices and the similarity
//! primitives used for word retrieval and answer ranking.
//!
//! All arithmetic is `f64`; the crate-wide comparison tolerance for 64-bit
//! values is [`F64_TOL`].
//!
//! # Matrix file format
//!
//! An [`EmbeddingMatrix`] is persisted as a little-endian binary file:
//!
//! ```text
//! offset  size      content
//! 0       8         magic b"TVEMB001"
//! 8       8         u64 row count N
//! 16      8         u64 dimension D
//! 24      8*N*D     f64 values, row-major
//! ```
//!
//! Row keys, when present, go to a sidecar file next to it with the extra
//! extension `.keys`: UTF-8, one key per line, in row order.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for 64-bit comparisons across the crate.
pub const F64_TOL: f64 = 1e-6;

const MATRIX_MAGIC: &[u8; 8] = b"TVEMB001";

/// A single finite vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding with zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.values, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.values).sqrt()
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How query/row similarity is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Raw inner product.
    #[default]
    Dot,
    /// Inner product of L2-normalized query and rows.
    Cosine,
}

/// How a sequence of per-token outputs is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

/// `N` stacked rows of dimension `D`, optionally labelled by unique keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    keys: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, keys: Option<Vec<String>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("embedding matrix with zero dimensions".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        if let Some(keys) = &keys {
            if keys.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    got: keys.len(),
                });
            }
            let mut seen = HashSet::with_capacity(rows);
            for k in keys {
                if !seen.insert(k.as_str()) {
                    return Err(Error::invalid(format!("duplicate row key `{k}`")));
                }
            }
        }
        Ok(Self {
            rows,
            dim,
            data,
            keys,
        })
    }

    pub fn from_rows(rows: &[Embedding], keys: Option<Vec<String>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(Embedding::dim)
            .ok_or_else(|| Error::Empty("no rows".into()))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.dim(),
                });
            }
            data.extend_from_slice(r.values());
        }
        Self::new(rows.len(), dim, data, keys)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> Option<&[String]> {
        self.keys.as_deref()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Copy with every row scaled to unit norm. Zero rows are an error.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.iter_rows() {
            let n = dot(row, row).sqrt();
            if n == 0.0 {
                return Err(Error::invalid("cannot normalize a zero row"));
            }
            data.extend(row.iter().map(|v| v / n));
        }
        Self::new(self.rows, self.dim, data, self.keys.clone())
    }

    /// Sidecar path holding row keys for a matrix stored at `path`.
    pub fn keys_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".keys");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix_file(path, MATRIX_MAGIC, self.rows, self.dim, &self.data)?;
        let kp = Self::keys_path(path);
        match &self.keys {
            Some(keys) => {
                let mut body = keys.join("\n");
                body.push('\n');
                fs::write(&kp, body).map_err(|e| Error::io(&kp, e))?;
            }
            None if kp.exists() => fs::remove_file(&kp).map_err(|e| Error::io(&kp, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, dim, data) = read_matrix_file(path, MATRIX_MAGIC)?;
        let kp = Self::keys_path(path);
        let keys = if kp.exists() {
            let text = fs::read_to_string(&kp).map_err(|e| Error::io(&kp, e))?;
            Some(text.lines().map(str::to_owned).collect::<Vec<_>>())
        } else {
            None
        };
        Self::new(rows, dim, data, keys)
    }
}

pub(crate) fn write_matrix_file(
    path: &Path,
    magic: &[u8; 8],
    rows: usize,
    dim: usize,
    data: &[f64],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(magic)?;
    write(&(rows as u64).to_le_bytes())?;
    write(&(dim as u64).to_le_bytes())?;
    for v in data {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_matrix_file(path: &Path, magic: &[u8; 8]) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_owned(),
        line: 0,
        message: msg.to_owned(),
    };
    if bytes.len() < 24 || &bytes[..8] != magic {
        return Err(bad("bad header"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if body.len() != rows * dim * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

/// Inner product of `query` with every row of `matrix`.
pub fn dot_scores(query: &Embedding, matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if query.dim() != matrix.dim() {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim(),
            got: query.dim(),
        });
    }
    Ok(matrix.iter_rows().map(|row| query.dot(row)).collect())
}

/// Scores under the chosen similarity. `Cosine` normalizes both sides.
pub fn similarity_scores(
    query: &Embedding,
    matrix: &EmbeddingMatrix,
    similarity: Similarity,
) -> Result<Vec<f64>> {
    match similarity {
        Similarity::Dot => dot_scores(query, matrix),
        Similarity::Cosine => dot_scores(&l2_normalize(query)?, &matrix.normalized()?),
    }
}

pub fn l2_normalize(e: &Embedding) -> Result<Embedding> {
    let n = e.norm();
    if n == 0.0 {
        return Err(Error::invalid("cannot normalize the zero vector"));
    }
    Embedding::new(e.values().iter().map(|v| v / n).collect())
}

/// Arithmetic mean over the positions where `mask` is true (all positions
/// when no mask is given).
pub fn mean_pool(seq: &[Embedding], mask: Option<&[bool]>) -> Result<Embedding> {
    if let Some(m) = mask {
        if m.len() != seq.len() {
            return Err(Error::DimensionMismatch {
                expected: seq.len(),
                got: m.len(),
            });
        }
    }
    let kept: Vec<&Embedding> = seq
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, e)| e)
        .collect();
    let first = kept
        .first()
        .ok_or_else(|| Error::Empty("nothing to pool".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for e in &kept {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    if kept.iter().all(|e| e.values() == first.values()) {
        return Ok((*first).clone());
    }
    let n = kept.len() as f64;
    Embedding::new(acc.into_iter().map(|a| a / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn basis_rows() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[-1.0, 0.0]), emb(&[0.6, 0.8])],
            None,
        )
        .unwrap()
    }

    #[test]
    fn dot_scores_orthonormal() {
        let m = EmbeddingMatrix::from_rows(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])], None).unwrap();
        assert_eq!(dot_scores(&emb(&[1.0, 0.0]), &m).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn dot_scores_diagonal_query() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let got = dot_scores(&emb(&[s, s]), &basis_rows()).unwrap();
        let want = [0.707_106_78, 0.707_106_78, -0.707_106_78, 0.989_949_49];
        for (g, w) in got.iter().zip(want) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-6);
        }
    }

    #[test]
    fn dot_scores_zero_query() {
        let got = dot_scores(&Embedding::zeros(2), &basis_rows()).unwrap();
        assert!(got.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dot_scores_dimension_mismatch() {
        assert!(matches!(
            dot_scores(&emb(&[1.0, 0.0, 0.0]), &basis_rows()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(l2_normalize(&emb(&[3.0, 4.0])).unwrap().values(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&emb(&[0.0, 1.0])).unwrap().values(), &[0.0, 1.0]);
        assert!(l2_normalize(&emb(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn mean_pool_cases() {
        let two = [emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        assert_eq!(mean_pool(&two, None).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(mean_pool(&two[..1], None).unwrap().values(), &[1.0, 0.0]);
        let masked = [emb(&[1.0, 0.0]), emb(&[9.0, 9.0])];
        assert_eq!(
            mean_pool(&masked, Some(&[true, false])).unwrap().values(),
            &[1.0, 0.0]
        );
        assert!(mean_pool(&[], None).is_err());
        assert!(mean_pool(&masked, Some(&[false, false])).is_err());
    }

    #[test]
    fn rejects_non_finite_and_duplicate_keys() {
        assert!(Embedding::new(vec![f64::NAN]).is_err());
        assert!(EmbeddingMatrix::new(2, 1, vec![1.0, 2.0], Some(vec!["a".into(), "a".into()])).is_err());
    }

    #[test]
    fn cosine_mode_normalizes_both_sides() {
        let m = EmbeddingMatrix::from_rows(&[emb(&[2.0, 0.0]), emb(&[0.0, 5.0])], None).unwrap();
        let s = similarity_scores(&emb(&[3.0, 0.0]), &m, Similarity::Cosine).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = EmbeddingMatrix::new(
            2,
            3,
            vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0],
            Some(vec!["alpha".into(), "beta".into()]),
        )
        .unwrap();
        m.save(&path).unwrap();
        assert_eq!(EmbeddingMatrix::load(&path).unwrap(), m);

        let unkeyed = EmbeddingMatrix::new(1, 2, vec![0.5, 0.25], None).unwrap();
        unkeyed.save(&path).unwrap();
        assert_eq!(EmbeddingMatrix::load(&path).unwrap(), unkeyed);
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
    }

    proptest! {
        #[test]
        fn dot_scores_bilinear_and_argmax_invariant(
            q in vec_strategy(4),
            rows in prop::collection::vec(vec_strategy(4), 1..20),
            c in 0.01f64..100.0,
        ) {
            let m = EmbeddingMatrix::new(rows.len(), 4, rows.concat(), None).unwrap();
            let base = dot_scores(&emb(&q), &m).unwrap();
            let scaled = dot_scores(&emb(&q).scale(c).unwrap(), &m).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((b * c - s).abs() <= 1e-9 * (1.0 + s.abs()));
            }
            let argmax = |v: &[f64]| {
                let mut best = 0;
                for i in 1..v.len() {
                    if v[i] > v[best] { best = i; }
                }
                best
            };
            // Exact ties can flip under rounding, so only compare when the winner is clear.
            let mut sorted = base.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9 * (1.0 + sorted[0].abs()) {
                prop_assert_eq!(argmax(&base), argmax(&scaled));
            }
        }

        #[test]
        fn normalize_idempotent(v in vec_strategy(6)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let once = l2_normalize(&emb(&v)).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-12);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn mean_pool_identical_vectors_exact(v in vec_strategy(5), n in 1usize..10) {
            let seq = vec![emb(&v); n];
            let pooled = mean_pool(&seq, None).unwrap();
            prop_assert_eq!(pooled.values(), v.as_slice());
        }
    }
}
