use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FrozenTextEncoder, FrozenVideoEncoder, VideoFeatures, SEGMENT_SECONDS};
use crate::embeddings::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoderConfig {
    pub dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SyntheticEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            noise_sigma: 0.0,
        }
    }
}

/// Desk-scale stand-in for a pretrained video/text dual encoder.
///
/// Each word maps to a seeded Gaussian direction scaled to unit norm. A video
/// is a registered plan of planted words per segment; a segment's feature is
/// the renormalized mean of its planted word vectors plus isotropic Gaussian
/// noise with standard deviation `noise_sigma` per component.
#[derive(Debug, Clone)]
pub struct SyntheticEncoderPair {
    config: SyntheticEncoderConfig,
    plans: BTreeMap<String, Vec<Vec<String>>>,
}

fn seeded(domain: &str, seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl SyntheticEncoderPair {
    pub fn new(config: SyntheticEncoderConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::invalid("synthetic encoder needs dim >= 1"));
        }
        if !(config.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(Self {
            config,
            plans: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SyntheticEncoderConfig {
        &self.config
    }

    /// Register the words planted in each segment of `video_id`.
    pub fn plant(&mut self, video_id: impl Into<String>, segments: Vec<Vec<String>>) -> Result<()> {
        if segments.is_empty() {
            return Err(Error::Empty("a planted video needs at least one segment".into()));
        }
        self.plans.insert(video_id.into(), segments);
        Ok(())
    }

    pub fn plan(&self, video_id: &str) -> Option<&[Vec<String>]> {
        self.plans.get(video_id).map(Vec::as_slice)
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = seeded("word", self.config.seed, word);
        let mut v: Vec<f64> = (0..self.config.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

impl FrozenTextEncoder for SyntheticEncoderPair {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_word(&self, word: &str) -> Result<Embedding> {
        if word.is_empty() {
            return Err(Error::Empty("cannot encode the empty word".into()));
        }
        Embedding::new(self.word_vector(word))
    }
}

impl FrozenVideoEncoder for SyntheticEncoderPair {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn segment_seconds(&self) -> f64 {
        SEGMENT_SECONDS
    }

    fn encode_video(&self, video_id: &str) -> Result<VideoFeatures> {
        let plan = self
            .plans
            .get(video_id)
            .ok_or_else(|| Error::MissingFeature(video_id.to_owned()))?;
        let d = self.config.dim;
        let mut noise = seeded("video", self.config.seed, video_id);
        let mut data = Vec::with_capacity(plan.len() * d);
        for words in plan {
            let mut acc = vec![0.0; d];
            for w in words {
                for (a, v) in acc.iter_mut().zip(self.word_vector(w)) {
                    *a += v;
                }
            }
            let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                acc.iter_mut().for_each(|x| *x /= n);
            }
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut noise);
                *a += self.config.noise_sigma * z;
            }
            data.extend(acc);
        }
        VideoFeatures::new(d, data)
    }

    fn video_ids(&self) -> Vec<String> {
        self.plans.keys().cloned().collect()
    }
}
