//! Dataset records, line-delimited JSON ingestion, the speech-channel filter
//! and the synthetic planted-signal generator.
//!
//! # Record files
//!
//! One UTF-8 JSON object per line. Question answering:
//!
//! ```json
//! {"video_id": "v1", "question": "what is in the pan", "answers": ["oil"],
//!  "negatives": ["salt", "egg", "rice"], "asr": "now pour the oil"}
//! ```
//!
//! `answers` holds five annotations on iVQA-style data and one otherwise;
//! `negatives` (exactly three) marks a multiple-choice sample; `asr` is
//! optional. Retrieval:
//!
//! ```json
//! {"video_id": "v1", "speech": "today we fry an egg", "caption": "frying an egg"}
//! ```
//!
//! # Dataset directories
//!
//! `dataset.json` (task + optional synthetic encoder settings),
//! `train.jsonl`, `test.jsonl`, `corpus.txt` (sentences for the vocabulary
//! builder) and `features/manifest.json` with one feature file per video.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec, SyntheticTask};

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::{PrecomputedFeatureStore, SyntheticEncoderConfig};
use crate::error::{Error, Result};
use crate::text::words;

/// Minimum number of non-stopword speech tokens for a multi-channel sample.
pub const MIN_CONTENT_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub video_id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub video_id: String,
    #[serde(default)]
    pub speech: String,
    pub caption: String,
}

pub trait Record: Serialize + DeserializeOwned {
    /// Schema checks beyond parsing; the error names the offending field.
    fn validate(&self) -> std::result::Result<(), String>;
}

impl Record for QaRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.trim().is_empty() {
            return Err("field `video_id` is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("field `question` is empty".into());
        }
        if self.answers.is_empty() || self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("field `answers` must hold at least one non-empty answer".into());
        }
        if let Some(neg) = &self.negatives {
            if neg.len() != 3 || self.answers.len() != 1 {
                return Err("field `negatives` needs exactly 3 entries and a single answer".into());
            }
        }
        Ok(())
    }
}

impl Record for RetrievalRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.trim().is_empty() {
            return Err("field `video_id` is empty".into());
        }
        if self.caption.trim().is_empty() {
            return Err("field `caption` is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    OpenQa,
    Mcqa,
    Retrieval,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "openqa" => Ok(Task::OpenQa),
            "mcqa" => Ok(Task::Mcqa),
            "retrieval" => Ok(Task::Retrieval),
            _ => Err(Error::invalid(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Qa(Vec<QaRecord>),
    Retrieval(Vec<RetrievalRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Qa(r) => r.len(),
            Records::Retrieval(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parse a record file. Fails on the first invalid line, naming it; blank
/// lines are skipped; an empty file is an error.
pub fn load_records<R: Record>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let rec: R = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} holds no records", path.display())));
    }
    Ok(out)
}

pub fn save_records<R: Record>(path: &Path, records: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, task: Task) -> Result<Records> {
    match task {
        Task::OpenQa => load_records(path).map(Records::Qa),
        Task::Mcqa => {
            let recs: Vec<QaRecord> = load_records(path)?;
            if let Some(pos) = recs.iter().position(|r| r.negatives.is_none()) {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: pos + 1,
                    message: "field `negatives` is required for multiple choice".into(),
                });
            }
            Ok(Records::Qa(recs))
        }
        Task::Retrieval => load_records(path).map(Records::Retrieval),
    }
}

/// Keep records whose speech has at least [`MIN_CONTENT_WORDS`] tokens
/// outside `stopwords`.
pub fn filter_multichannel(
    records: &[RetrievalRecord],
    stopwords: &HashSet<String>,
) -> Vec<RetrievalRecord> {
    records
        .iter()
        .filter(|r| words(&r.speech).filter(|w| !stopwords.contains(w)).count() >= MIN_CONTENT_WORDS)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<SyntheticEncoderConfig>,
}

/// Paths of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn train_path(&self) -> PathBuf {
        self.root.join("train.jsonl")
    }

    pub fn test_path(&self) -> PathBuf {
        self.root.join("test.jsonl")
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.root.join("corpus.txt")
    }

    pub fn features_manifest(&self) -> PathBuf {
        self.root.join("features").join("manifest.json")
    }

    pub fn meta(&self) -> Result<DatasetMeta> {
        let p = self.meta_path();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Non-empty lines of `corpus.txt`.
    pub fn corpus(&self) -> Result<Vec<String>> {
        let p = self.corpus_path();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn features(&self) -> Result<PrecomputedFeatureStore> {
        PrecomputedFeatureStore::open(&self.features_manifest())
    }

    pub fn train(&self) -> Result<Records> {
        load_dataset(&self.train_path(), self.meta()?.task)
    }

    pub fn test(&self) -> Result<Records> {
        load_dataset(&self.test_path(), self.meta()?.task)
    }
}
