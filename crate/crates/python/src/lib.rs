//! Python bindings: losses, token retrieval, metrics, the synthetic
//! generator, checkpoints and the command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyValueError, PyRuntimeError};
use pyo3::prelude::*;

use ::textvid as tv;
use tv::datasets::{generate_synthetic, SyntheticSpec};
use tv::embeddings::{EmbeddingMatrix, Similarity};
use tv::encoders::VideoFeatures;
use tv::eval::CreditRule;
use tv::fusion::FusionModel;
use tv::objectives::ScoreMatrix;
use tv::token_retrieval::{Vocabulary, VocabularySource};

fn err(e: tv::Error) -> PyErr {
    match e {
        tv::Error::InvalidArgument(_) | tv::Error::DimensionMismatch { .. } | tv::Error::Empty(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Mean softmax cross-entropy of each row against its label column.
#[pyfunction]
#[pyo3(signature = (scores, labels, temperature = 1.0))]
fn nce_loss(scores: Vec<Vec<f64>>, labels: Vec<usize>, temperature: f64) -> PyResult<f64> {
    let s = ScoreMatrix::from_rows(&scores).map_err(err)?;
    tv::objectives::nce_loss_with_temperature(&s, &labels, temperature).map_err(err)
}

/// Average of the row-wise and column-wise losses on a square matrix whose
/// diagonal holds the positives.
#[pyfunction]
fn symmetric_loss(scores: Vec<Vec<f64>>) -> PyResult<f64> {
    let s = ScoreMatrix::from_rows(&scores).map_err(err)?;
    tv::objectives::symmetric_loss(&s).map_err(err)
}

/// Top-`k` `(word, score)` pairs for every feature row, by inner product.
#[pyfunction]
fn retrieve_tokens(
    features: Vec<Vec<f64>>,
    words: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    k: usize,
) -> PyResult<Vec<Vec<(String, f64)>>> {
    let rows: Vec<tv::embeddings::Embedding> = embeddings
        .into_iter()
        .map(tv::embeddings::Embedding::new)
        .collect::<tv::Result<_>>()
        .map_err(err)?;
    let matrix = EmbeddingMatrix::from_rows(&rows, None).map_err(err)?;
    let vocab = Vocabulary::from_parts(words, matrix, VocabularySource::ExternalList).map_err(err)?;
    let f = VideoFeatures::from_rows(&features).map_err(err)?;
    let segments = tv::token_retrieval::retrieve_tokens(&f, &vocab, k, Similarity::Dot).map_err(err)?;
    Ok(segments
        .into_iter()
        .map(|s| s.entries.into_iter().map(|e| (e.word, e.score)).collect())
        .collect())
}

/// Credit for one prediction against its annotations.
#[pyfunction]
#[pyo3(signature = (prediction, annotations, rule = "auto"))]
fn credit(prediction: &str, annotations: Vec<String>, rule: &str) -> PyResult<f64> {
    let rule: CreditRule = rule.parse().map_err(err)?;
    Ok(tv::eval::credit(prediction, &annotations, rule))
}

/// Recall at 1, 5 and 10 and their mean, in percent, from 1-based ranks.
#[pyfunction]
fn recall_metrics(ranks: Vec<usize>) -> PyResult<(f64, f64, f64, f64)> {
    let m = tv::eval::recall_metrics(&ranks).map_err(err)?;
    Ok((m.r1, m.r5, m.r10, m.aver))
}

/// Write a planted-signal dataset directory; `spec` is TOML text with any
/// generator settings to override.
#[pyfunction]
#[pyo3(signature = (out_dir, spec = ""))]
fn write_synthetic(out_dir: PathBuf, spec: &str) -> PyResult<()> {
    let spec = SyntheticSpec::from_toml(spec).map_err(err)?;
    generate_synthetic(&spec).and_then(|ds| ds.write(&out_dir)).map_err(err)
}

/// Run the command-line interface; `args` excludes the program name.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    tv::cli::run(std::iter::once("textvid".to_string()).chain(args))
}

/// A trained checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: FusionModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (inner, _) = FusionModel::load(&dir).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.inner.fingerprint().map_err(err)
    }

    /// Answer embeddings, one row per answer.
    fn encode_answers(&self, answers: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
        let t = self.inner.encode_answers(&refs).map_err(err)?;
        t.to_vec2::<f64>().map_err(|e| err(e.into()))
    }
}

#[pymodule]
fn textvid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_loss, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(credit, m)?)?;
    m.add_function(wrap_pyfunction!(recall_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
