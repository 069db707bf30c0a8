//! Planted-signal data for desk-scale checks.
//!
//! Vocabulary words are drawn from the bundled noun list; the first
//! `answers` of them form the answer corpus and the rest are context words.
//! Each video plants its answer alone in `answer_segments` random segments
//! and `planted_per_segment` of the sample's context words in every other
//! segment, so the answer's frozen feature equals its word vector up to
//! noise. Questions are templates over context words.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_records, DatasetDir, DatasetMeta, QaRecord, Records, RetrievalRecord, Task};
use crate::encoders::{PrecomputedFeatureStore, SyntheticEncoderConfig, SyntheticEncoderPair};
use crate::error::{Error, Result};
use crate::token_retrieval::WordlistTagger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    OpenQa,
    Mcqa,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub train_samples: usize,
    pub test_samples: usize,
    pub vocab_size: usize,
    /// Size of the answer corpus (a prefix of the vocabulary).
    pub answers: usize,
    pub segments: usize,
    pub answer_segments: usize,
    pub context_words: usize,
    pub planted_per_segment: usize,
    pub noise_sigma: f64,
    pub dim: usize,
    pub with_asr: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: SyntheticTask::OpenQa,
            train_samples: 1000,
            test_samples: 200,
            vocab_size: 200,
            answers: 100,
            segments: 10,
            answer_segments: 2,
            context_words: 4,
            planted_per_segment: 2,
            noise_sigma: 0.05,
            dim: 64,
            with_asr: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Parse generator settings; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("synthetic spec: {e}")))
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("train_samples", self.train_samples),
            ("vocab_size", self.vocab_size),
            ("answers", self.answers),
            ("segments", self.segments),
            ("answer_segments", self.answer_segments),
            ("context_words", self.context_words),
            ("planted_per_segment", self.planted_per_segment),
            ("dim", self.dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("synthetic spec `{name}` must be positive")));
        }
        if self.answers > self.vocab_size {
            return Err(Error::invalid(format!(
                "answers ({}) exceed vocab_size ({})",
                self.answers, self.vocab_size
            )));
        }
        if self.vocab_size - self.answers < self.context_words {
            return Err(Error::invalid("not enough context words in the vocabulary"));
        }
        if self.answer_segments >= self.segments {
            return Err(Error::invalid("answer_segments must leave room for context segments"));
        }
        if self.planted_per_segment > self.context_words {
            return Err(Error::invalid("planted_per_segment exceeds context_words"));
        }
        if self.task == SyntheticTask::Mcqa && self.answers < 4 {
            return Err(Error::invalid("multiple choice needs at least 4 answers"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Records,
    pub test: Records,
    pub encoder: SyntheticEncoderPair,
    /// Sentences covering every planted word; input to the vocabulary builder.
    pub corpus: Vec<String>,
    pub answer_words: Vec<String>,
    pub context_words: Vec<String>,
}

impl SyntheticDataset {
    pub fn planted(&self, video_id: &str) -> Option<&[Vec<String>]> {
        self.encoder.plan(video_id)
    }

    pub fn qa(&self) -> Option<(&[QaRecord], &[QaRecord])> {
        match (&self.train, &self.test) {
            (Records::Qa(a), Records::Qa(b)) => Some((a, b)),
            _ => None,
        }
    }

    /// Write a dataset directory (see the module docs of `datasets`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = DatasetDir::new(dir);
        let task = match self.spec.task {
            SyntheticTask::OpenQa => Task::OpenQa,
            SyntheticTask::Mcqa => Task::Mcqa,
            SyntheticTask::Retrieval => Task::Retrieval,
        };
        let meta = DatasetMeta {
            task,
            encoder: Some(*self.encoder.config()),
        };
        let mp = d.meta_path();
        fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))?;
        for (path, recs) in [(d.train_path(), &self.train), (d.test_path(), &self.test)] {
            match recs {
                Records::Qa(r) => save_records(&path, r)?,
                Records::Retrieval(r) => save_records(&path, r)?,
            }
        }
        let cp = d.corpus_path();
        let mut body = self.corpus.join("\n");
        body.push('\n');
        fs::write(&cp, body).map_err(|e| Error::io(&cp, e))?;
        PrecomputedFeatureStore::export(&self.encoder, &dir.join("features"))?;
        Ok(())
    }
}

const TEMPLATES: [&str; 4] = [
    "what is shown with the {a} and the {b}",
    "what appears next to the {a} and {b}",
    "which object is used with the {a} and the {b}",
    "what do you see near the {a} and {b}",
];

const ASR_TEMPLATES: [&str; 3] = [
    "okay now i take the {a} and put it by the {b}",
    "so here we have the {a} and also the {b}",
    "first grab the {a} then move the {b} over",
];

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replace("{a}", a).replace("{b}", b)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut lexicon = WordlistTagger::bundled().nouns();
    if spec.vocab_size > lexicon.len() {
        return Err(Error::invalid(format!(
            "vocab_size {} exceeds the {} bundled nouns",
            spec.vocab_size,
            lexicon.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    lexicon.shuffle(&mut rng);
    lexicon.truncate(spec.vocab_size);
    let answer_words = lexicon[..spec.answers].to_vec();
    let context_pool = lexicon[spec.answers..].to_vec();

    let mut encoder = SyntheticEncoderPair::new(SyntheticEncoderConfig {
        dim: spec.dim,
        seed: spec.seed,
        noise_sigma: spec.noise_sigma,
    })?;
    let mut corpus = Vec::new();
    let mut qa = Vec::new();
    let mut ret = Vec::new();
    let total = spec.train_samples + spec.test_samples;

    for i in 0..total {
        let video_id = format!("syn{i:05}");
        let answer = answer_words.choose(&mut rng).expect("non-empty").clone();
        let context: Vec<String> = context_pool
            .choose_multiple(&mut rng, spec.context_words)
            .cloned()
            .collect();

        let mut order: Vec<usize> = (0..spec.segments).collect();
        order.shuffle(&mut rng);
        let mut is_answer = vec![false; spec.segments];
        for &s in &order[..spec.answer_segments] {
            is_answer[s] = true;
        }
        let plan: Vec<Vec<String>> = is_answer
            .iter()
            .map(|&a| {
                if a {
                    vec![answer.clone()]
                } else {
                    context
                        .choose_multiple(&mut rng, spec.planted_per_segment)
                        .cloned()
                        .collect()
                }
            })
            .collect();
        encoder.plant(video_id.clone(), plan)?;

        let (a, b) = (&context[0], &context[1 % context.len()]);
        let question = fill(TEMPLATES[rng.random_range(0..TEMPLATES.len())], a, b);
        let asr = spec.with_asr.then(|| {
            let c = &context[context.len() - 1];
            fill(ASR_TEMPLATES[rng.random_range(0..ASR_TEMPLATES.len())], c, a)
        });

        corpus.push(question.clone());
        corpus.push(answer.clone());
        corpus.push(format!("the video shows the {answer} and the {}", context.join(" and the ")));

        match spec.task {
            SyntheticTask::OpenQa | SyntheticTask::Mcqa => {
                let negatives = (spec.task == SyntheticTask::Mcqa).then(|| {
                    let others: Vec<&String> =
                        answer_words.iter().filter(|w| **w != answer).collect();
                    others
                        .choose_multiple(&mut rng, 3)
                        .map(|w| (*w).clone())
                        .collect()
                });
                qa.push(QaRecord {
                    video_id,
                    question,
                    answers: vec![answer],
                    negatives,
                    asr,
                });
            }
            SyntheticTask::Retrieval => {
                let speech = asr.unwrap_or_else(|| {
                    fill(ASR_TEMPLATES[rng.random_range(0..ASR_TEMPLATES.len())], a, b)
                });
                ret.push(RetrievalRecord {
                    video_id,
                    speech,
                    caption: format!("a person shows the {answer}"),
                });
            }
        }
    }

    let n = spec.train_samples;
    let (train, test) = if spec.task == SyntheticTask::Retrieval {
        let test = ret.split_off(n);
        (Records::Retrieval(ret), Records::Retrieval(test))
    } else {
        let test = qa.split_off(n);
        (Records::Qa(qa), Records::Qa(test))
    };

    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        test,
        encoder,
        corpus,
        answer_words,
        context_words: context_pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Similarity;
    use crate::encoders::FrozenVideoEncoder;
    use crate::token_retrieval::{retrieve_tokens, Vocabulary};

    fn small(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            train_samples: 40,
            test_samples: 10,
            noise_sigma: sigma,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&small(0.1)).unwrap();
        let b = generate_synthetic(&small(0.1)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.corpus, b.corpus);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for f in ["train.jsonl", "test.jsonl", "corpus.txt", "dataset.json", "features/manifest.json", "features/syn00003.feat"] {
            assert_eq!(fs::read(da.path().join(f)).unwrap(), fs::read(db.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SyntheticSpec { answers: 300, ..small(0.0) };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec { vocab_size: 5000, answers: 10, ..small(0.0) };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn answers_are_covered_by_the_vocabulary() {
        let ds = generate_synthetic(&small(0.0)).unwrap();
        let vocab = Vocabulary::build(&ds.corpus, &WordlistTagger::bundled(), &ds.encoder).unwrap();
        let (train, test) = ds.qa().unwrap();
        for r in train.iter().chain(test) {
            assert!(vocab.index_of(&r.answers[0]).is_some());
        }
    }

    #[test]
    fn noiseless_retrieval_recovers_planted_words() {
        let ds = generate_synthetic(&small(0.0)).unwrap();
        let vocab = Vocabulary::build(&ds.corpus, &WordlistTagger::bundled(), &ds.encoder).unwrap();
        for id in ds.encoder.video_ids() {
            let f = ds.encoder.encode_video(&id).unwrap();
            let plan = ds.planted(&id).unwrap();
            let k = plan.iter().map(Vec::len).max().unwrap();
            for (seg, words) in retrieve_tokens(&f, &vocab, k, Similarity::Dot).unwrap().iter().zip(plan) {
                let got: Vec<&str> = seg.entries.iter().take(words.len()).map(|e| e.word.as_str()).collect();
                for w in words {
                    assert!(got.contains(&w.as_str()), "{id}: {w} not in {got:?}");
                }
            }
        }
    }

    #[test]
    fn mcqa_and_retrieval_records() {
        let mc = generate_synthetic(&SyntheticSpec { task: SyntheticTask::Mcqa, ..small(0.0) }).unwrap();
        let (train, _) = mc.qa().unwrap();
        for r in train {
            let neg = r.negatives.as_ref().unwrap();
            assert_eq!(neg.len(), 3);
            assert!(!neg.contains(&r.answers[0]));
        }
        let rt = generate_synthetic(&SyntheticSpec { task: SyntheticTask::Retrieval, ..small(0.0) }).unwrap();
        assert!(matches!(rt.train, Records::Retrieval(ref r) if r.len() == 40));
    }
}
