//! On-disk features: one binary file per video plus a JSON manifest.
//!
//! Feature files use the matrix layout of [`crate::embeddings`] with magic
//! `b"TVFEAT01"`: header `T`, `D` as little-endian u64, then `T*D` f64 values
//! row-major. The manifest is
//!
//! ```json
//! {"dim": 64, "segment_seconds": 1.5, "videos": {"vid0": "vid0.feat"}}
//! ```
//!
//! with paths relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrozenVideoEncoder, VideoFeatures};
use crate::embeddings::{read_matrix_file, write_matrix_file};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 8] = b"TVFEAT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub dim: usize,
    pub segment_seconds: f64,
    pub videos: BTreeMap<String, String>,
}

impl VideoFeatures {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix_file(path, FEATURE_MAGIC, self.segments(), self.dim(), self.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, dim, data) = read_matrix_file(path, FEATURE_MAGIC)?;
        VideoFeatures::new(dim, data)
    }
}

/// Read-only lookup of precomputed features by video id.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatureStore {
    root: PathBuf,
    manifest: FeatureManifest,
}

impl PrecomputedFeatureStore {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: FeatureManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let root = manifest_path
            .parent()
            .map(Path::to_owned)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { root, manifest })
    }

    /// Write every video of `encoder` under `dir` and return the opened store.
    pub fn export(encoder: &dyn FrozenVideoEncoder, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut videos = BTreeMap::new();
        for id in encoder.video_ids() {
            let file = format!("{}.feat", sanitize(&id));
            encoder.encode_video(&id)?.save(&dir.join(&file))?;
            videos.insert(id, file);
        }
        let manifest = FeatureManifest {
            dim: encoder.dim(),
            segment_seconds: encoder.segment_seconds(),
            videos,
        };
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Self::open(&path)
    }

    pub fn manifest(&self) -> &FeatureManifest {
        &self.manifest
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl FrozenVideoEncoder for PrecomputedFeatureStore {
    fn dim(&self) -> usize {
        self.manifest.dim
    }

    fn segment_seconds(&self) -> f64 {
        self.manifest.segment_seconds
    }

    fn encode_video(&self, video_id: &str) -> Result<VideoFeatures> {
        let rel = self
            .manifest
            .videos
            .get(video_id)
            .ok_or_else(|| Error::MissingFeature(video_id.to_owned()))?;
        let f = VideoFeatures::load(&self.root.join(rel))?;
        if f.dim() != self.manifest.dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.dim,
                got: f.dim(),
            });
        }
        if f.is_empty() {
            return Err(Error::Empty(format!("video `{video_id}` has no segments")));
        }
        Ok(VideoFeatures::with_rate(
            f.dim(),
            f.data().to_vec(),
            self.manifest.segment_seconds,
        )?)
    }

    fn video_ids(&self) -> Vec<String> {
        self.manifest.videos.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{SyntheticEncoderConfig, SyntheticEncoderPair};

    #[test]
    fn export_then_lookup_matches_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = SyntheticEncoderPair::new(SyntheticEncoderConfig {
            dim: 8,
            seed: 1,
            noise_sigma: 0.1,
        })
        .unwrap();
        enc.plant("a/1", vec![vec!["x".into()], vec!["y".into()]]).unwrap();
        enc.plant("b", vec![vec!["z".into()]]).unwrap();
        let store = PrecomputedFeatureStore::export(&enc, dir.path()).unwrap();
        assert_eq!(store.video_ids(), vec!["a/1".to_owned(), "b".to_owned()]);
        assert_eq!(store.encode_video("a/1").unwrap(), enc.encode_video("a/1").unwrap());
        assert!(matches!(
            store.encode_video("missing"),
            Err(Error::MissingFeature(_))
        ));
    }
}
