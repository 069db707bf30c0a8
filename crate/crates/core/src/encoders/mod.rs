//! Frozen video/word encoders, the feature store, and the trainable text
//! model interface.

mod store;
mod synthetic;
mod text_model;

pub use store::{FeatureManifest, PrecomputedFeatureStore};
pub use synthetic::{SyntheticEncoderConfig, SyntheticEncoderPair};
pub use text_model::{
    encode_batch, encode_text, EncodedText, TextModel, TextModelConfig, ToyTextModel,
    WordTokenizer, PAD_ID, UNK_ID,
};

use sha2::{Digest, Sha256};

use crate::embeddings::{Embedding, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Default temporal rate of frozen video features: one vector per 1.5 s.
pub const SEGMENT_SECONDS: f64 = 1.5;

/// `T` segment embeddings of dimension `D`, in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    dim: usize,
    data: Vec<f64>,
    segment_seconds: f64,
}

impl VideoFeatures {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_rate(dim, data, SEGMENT_SECONDS)
    }

    pub fn with_rate(dim: usize, data: Vec<f64>, segment_seconds: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("video features with zero dimensions".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim * (data.len() / dim + 1),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video features".into()));
        }
        Ok(Self {
            dim,
            data,
            segment_seconds,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment_seconds(&self) -> f64 {
        self.segment_seconds
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn segment(&self, t: usize) -> Embedding {
        Embedding::new(self.row(t).to_vec()).expect("rows are finite")
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            dim: self.dim,
            data,
            segment_seconds: self.segment_seconds,
        }
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::with_rate(
            self.dim,
            self.data.iter().map(|v| v * c).collect(),
            self.segment_seconds,
        )
    }

    pub fn as_matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(self.segments(), self.dim, self.data.clone(), None)
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
    }
}

/// Frozen video encoder: maps a video id to its segment features.
pub trait FrozenVideoEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn segment_seconds(&self) -> f64 {
        SEGMENT_SECONDS
    }

    fn encode_video(&self, video_id: &str) -> Result<VideoFeatures>;

    /// Every id this encoder can serve, sorted.
    fn video_ids(&self) -> Vec<String>;
}

/// Frozen word encoder into the same space as the video encoder.
pub trait FrozenTextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_word(&self, word: &str) -> Result<Embedding>;
}

/// SHA-256 over every video's features, in id order. Used to prove frozen
/// encoders are untouched by training.
pub fn video_encoder_fingerprint(enc: &dyn FrozenVideoEncoder) -> Result<String> {
    let mut h = Sha256::new();
    for id in enc.video_ids() {
        h.update(id.as_bytes());
        enc.encode_video(&id)?.hash_into(&mut h);
    }
    Ok(crate::nn::hex(&h.finalize()))
}

pub fn text_encoder_fingerprint(enc: &dyn FrozenTextEncoder, words: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for w in words {
        h.update(w.as_bytes());
        for v in enc.encode_word(w)?.values() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(crate::nn::hex(&h.finalize()))
}
