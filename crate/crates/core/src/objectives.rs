//! Contrastive training losses over in-batch score matrices.
//!
//! `S[i][j]` is the score of sample `i`'s fused embedding against answer (or
//! query) `j`. [`nce_loss`] is softmax cross-entropy of each row against its
//! labelled column, averaged over rows. [`symmetric_loss`] averages the
//! row-wise and column-wise versions on a square matrix with the diagonal as
//! ground truth. Neither applies a temperature; the `_with_temperature`
//! variants divide scores by one.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, log_softmax_last};

/// Dense row-major score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged score rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

fn check_labels(s: &ScoreMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != s.rows {
        return Err(Error::DimensionMismatch {
            expected: s.rows,
            got: labels.len(),
        });
    }
    if s.rows == 0 || s.cols == 0 {
        return Err(Error::Empty("score matrix has no entries".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.cols) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} columns",
            s.cols
        )));
    }
    Ok(())
}

/// Numerically stable softmax of one row.
fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn nce_loss(s: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    nce_loss_with_temperature(s, labels, 1.0)
}

pub fn nce_loss_with_temperature(s: &ScoreMatrix, labels: &[usize], temperature: f64) -> Result<f64> {
    check_labels(s, labels)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let total: f64 = (0..s.rows)
        .map(|i| {
            let row: Vec<f64> = s.row(i).iter().map(|v| v / temperature).collect();
            log_sum_exp(&row) - row[labels[i]]
        })
        .sum();
    Ok(total / s.rows as f64)
}

/// Analytic d(nce_loss)/dS: `(softmax(S_i) - onehot(label_i)) / rows`.
pub fn nce_gradient(s: &ScoreMatrix, labels: &[usize]) -> Result<ScoreMatrix> {
    check_labels(s, labels)?;
    let n = s.rows as f64;
    let mut data = Vec::with_capacity(s.data.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut p = softmax(s.row(i));
        p[label] -= 1.0;
        data.extend(p.into_iter().map(|v| v / n));
    }
    Ok(s.with_data(data))
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_square(s: &ScoreMatrix) -> Result<()> {
    if s.rows != s.cols {
        return Err(Error::invalid(format!(
            "symmetric loss needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    Ok(())
}

pub fn symmetric_loss(s: &ScoreMatrix) -> Result<f64> {
    check_square(s)?;
    let d = diagonal(s.rows);
    Ok(0.5 * (nce_loss(s, &d)? + nce_loss(&s.transpose(), &d)?))
}

pub fn symmetric_gradient(s: &ScoreMatrix) -> Result<ScoreMatrix> {
    check_square(s)?;
    let d = diagonal(s.rows);
    let rows = nce_gradient(s, &d)?;
    let cols = nce_gradient(&s.transpose(), &d)?.transpose();
    Ok(s.with_data(
        rows.data
            .iter()
            .zip(&cols.data)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    ))
}

/// Which loss a gradient check targets.
#[derive(Debug, Clone)]
pub enum Objective {
    Nce(Vec<usize>),
    Symmetric,
}

impl Objective {
    pub fn loss(&self, s: &ScoreMatrix) -> Result<f64> {
        match self {
            Objective::Nce(labels) => nce_loss(s, labels),
            Objective::Symmetric => symmetric_loss(s),
        }
    }

    pub fn gradient(&self, s: &ScoreMatrix) -> Result<ScoreMatrix> {
        match self {
            Objective::Nce(labels) => nce_gradient(s, labels),
            Objective::Symmetric => symmetric_gradient(s),
        }
    }
}

/// Largest deviation between the analytic gradient and central finite
/// differences with step `h`, relative to the larger of the two gradients'
/// max-norms. Zero when both gradients vanish.
pub fn loss_gradient_check(objective: &Objective, s: &ScoreMatrix, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let analytic = objective.gradient(s)?;
    let mut numeric = Vec::with_capacity(s.data.len());
    for idx in 0..s.data.len() {
        let mut plus = s.data.clone();
        let mut minus = s.data.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let lp = objective.loss(&s.with_data(plus))?;
        let lm = objective.loss(&s.with_data(minus))?;
        numeric.push((lp - lm) / (2.0 * h));
    }
    let scale = analytic
        .data
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let worst = analytic
        .data
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Ok(worst / scale)
}

fn one_hot(rows: usize, cols: usize, labels: &[usize]) -> Result<Tensor> {
    let mut v = vec![0.0f64; rows * cols];
    for (i, &l) in labels.iter().enumerate() {
        v[i * cols + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (rows, cols), &nn::device())?)
}

/// Differentiable [`nce_loss`] on a `[B, A]` score tensor.
pub fn nce_loss_tensor(scores: &Tensor, labels: &[usize], temperature: f64) -> Result<Tensor> {
    let (b, a) = scores.dims2()?;
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= a) {
        return Err(Error::invalid(format!("label {bad} out of range for {a} columns")));
    }
    let logp = log_softmax_last(&(scores / temperature)?)?;
    let picked = (logp * one_hot(b, a, labels)?)?.sum_all()?;
    Ok((picked / -(b as f64))?)
}

/// Differentiable [`symmetric_loss`] on a square `[B, B]` score tensor.
pub fn symmetric_loss_tensor(scores: &Tensor, temperature: f64) -> Result<Tensor> {
    let (b, a) = scores.dims2()?;
    if a != b {
        return Err(Error::invalid(format!(
            "symmetric loss needs a square matrix, got {b}x{a}"
        )));
    }
    let d = diagonal(b);
    let rows = nce_loss_tensor(scores, &d, temperature)?;
    let cols = nce_loss_tensor(&scores.t()?.contiguous()?, &d, temperature)?;
    Ok(((rows + cols)? * 0.5)?)
}
