//! Text-token video representation: per-segment top-k word retrieval
//! against a vocabulary, windowed max pooling of the retrieved words, and
//! feature subsampling for long videos.

mod tagger;
mod vocabulary;

pub use tagger::{bundled_stopwords, PosTag, Tagger, WordlistTagger};
pub use vocabulary::{Vocabulary, VocabularySource};

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::{similarity_scores, Similarity};
use crate::encoders::VideoFeatures;
use crate::error::{Error, Result};

/// Words retrieved per segment by default.
pub const DEFAULT_K: usize = 15;
/// Words retrieved per segment on iVQA-style data with the answer-word vocabulary.
pub const IVQA_K: usize = 25;
pub const DEFAULT_POOL_KERNEL: usize = 5;
pub const DEFAULT_MAX_SEGMENTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWord {
    pub word: String,
    /// Row of the word in the vocabulary; breaks score ties (lower wins).
    pub index: usize,
    pub score: f64,
}

fn by_score_then_index(a: &ScoredWord, b: &ScoredWord) -> Ordering {
    // scores are finite; partial_cmp treats -0.0 and 0.0 as a tie
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTokens {
    pub segment_index: usize,
    /// Descending score.
    pub entries: Vec<ScoredWord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedVideo {
    pub per_segment: Vec<SegmentTokens>,
    /// Pooled words per temporal window, each in descending score.
    pub windows: Vec<Vec<ScoredWord>>,
}

impl TokenizedVideo {
    /// Flat pooled word sequence, windows in temporal order.
    pub fn pooled(&self) -> Vec<String> {
        self.windows
            .iter()
            .flat_map(|w| w.iter().map(|s| s.word.clone()))
            .collect()
    }

    pub fn window_words(&self) -> Vec<Vec<String>> {
        self.windows
            .iter()
            .map(|w| w.iter().map(|s| s.word.clone()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenRetrievalConfig {
    pub k: usize,
    pub pool_kernel: usize,
    pub max_segments: usize,
    pub similarity: Similarity,
}

impl Default for TokenRetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            pool_kernel: DEFAULT_POOL_KERNEL,
            max_segments: DEFAULT_MAX_SEGMENTS,
            similarity: Similarity::Dot,
        }
    }
}

/// Top-`k` vocabulary words for every segment. Exact: ties on score go to
/// the lower vocabulary index.
pub fn retrieve_tokens(
    features: &VideoFeatures,
    vocab: &Vocabulary,
    k: usize,
    similarity: Similarity,
) -> Result<Vec<SegmentTokens>> {
    if k == 0 || k > vocab.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be within 1..={}",
            vocab.len()
        )));
    }
    if features.dim() != vocab.dim() {
        return Err(Error::DimensionMismatch {
            expected: vocab.dim(),
            got: features.dim(),
        });
    }
    (0..features.segments())
        .map(|t| {
            let scores = similarity_scores(&features.segment(t), vocab.embeddings(), similarity)?;
            let mut all: Vec<ScoredWord> = scores
                .into_iter()
                .enumerate()
                .map(|(index, score)| ScoredWord {
                    word: String::new(),
                    index,
                    score,
                })
                .collect();
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, by_score_then_index);
                all.truncate(k);
            }
            all.sort_by(by_score_then_index);
            for e in &mut all {
                e.word = vocab.word(e.index).to_owned();
            }
            Ok(SegmentTokens {
                segment_index: t,
                entries: all,
            })
        })
        .collect()
}

/// Windowed max pooling over retrieved words.
///
/// Segments are grouped into consecutive windows of `kernel`; inside a
/// window each word keeps its best score and the top `k` survive.
pub fn pool_tokens(
    per_segment: &[SegmentTokens],
    kernel: usize,
    k: usize,
) -> Result<Vec<Vec<ScoredWord>>> {
    if kernel == 0 {
        return Err(Error::invalid("pool kernel must be >= 1"));
    }
    Ok(per_segment
        .chunks(kernel)
        .map(|window| {
            let mut best: HashMap<&str, &ScoredWord> = HashMap::new();
            for e in window.iter().flat_map(|s| &s.entries) {
                best.entry(e.word.as_str())
                    .and_modify(|cur| {
                        if by_score_then_index(e, cur) == Ordering::Less {
                            *cur = e;
                        }
                    })
                    .or_insert(e);
            }
            let mut merged: Vec<ScoredWord> = best.into_values().cloned().collect();
            merged.sort_by(by_score_then_index);
            merged.truncate(k);
            merged
        })
        .collect())
}

/// Keep at most `max_segments` rows: row `floor(i * T / max_segments)` for
/// each `i`, which always includes row 0.
pub fn subsample_features(features: &VideoFeatures, max_segments: usize) -> Result<VideoFeatures> {
    if max_segments == 0 {
        return Err(Error::invalid("max_segments must be >= 1"));
    }
    let t = features.segments();
    if t <= max_segments {
        return Ok(features.clone());
    }
    let rows: Vec<usize> = (0..max_segments).map(|i| i * t / max_segments).collect();
    Ok(features.select(&rows))
}

/// Subsample, retrieve and pool in one go.
pub fn tokenize_video(
    features: &VideoFeatures,
    vocab: &Vocabulary,
    cfg: &TokenRetrievalConfig,
) -> Result<TokenizedVideo> {
    let features = subsample_features(features, cfg.max_segments)?;
    let per_segment = retrieve_tokens(&features, vocab, cfg.k, cfg.similarity)?;
    let windows = pool_tokens(&per_segment, cfg.pool_kernel, cfg.k)?;
    Ok(TokenizedVideo {
        per_segment,
        windows,
    })
}

/// Space-joined pooled words; with `temporal_markers`, "first" opens the
/// first window and "then" each later one.
pub fn render_token_sequence(windows: &[Vec<String>], temporal_markers: bool) -> String {
    let mut out: Vec<&str> = Vec::new();
    for (i, w) in windows.iter().filter(|w| !w.is_empty()).enumerate() {
        if temporal_markers {
            out.push(if i == 0 { "first" } else { "then" });
        }
        out.extend(w.iter().map(String::as_str));
    }
    out.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{dot_scores, EmbeddingMatrix};
    use crate::embeddings::Embedding;
    use proptest::prelude::*;

    fn vocab(rows: &[&[f64]]) -> Vocabulary {
        let words: Vec<String> = (0..rows.len()).map(|i| format!("w{i}")).collect();
        let m = EmbeddingMatrix::new(rows.len(), rows[0].len(), rows.concat(), Some(words.clone()))
            .unwrap();
        Vocabulary::from_parts(words, m, VocabularySource::ExternalList).unwrap()
    }

    fn seg(i: usize, entries: &[(&str, usize, f64)]) -> SegmentTokens {
        SegmentTokens {
            segment_index: i,
            entries: entries
                .iter()
                .map(|&(w, index, score)| ScoredWord {
                    word: w.into(),
                    index,
                    score,
                })
                .collect(),
        }
    }

    fn words(ws: &[ScoredWord]) -> Vec<&str> {
        ws.iter().map(|s| s.word.as_str()).collect()
    }

    #[test]
    fn single_word_vocabulary() {
        let v = vocab(&[&[1.0, 0.0]]);
        let f = VideoFeatures::from_rows(&[vec![0.2, 0.9], vec![-1.0, 0.0]]).unwrap();
        let out = retrieve_tokens(&f, &v, 1, Similarity::Dot).unwrap();
        assert!(out.iter().all(|s| words(&s.entries) == ["w0"]));
    }

    #[test]
    fn hand_computed_top2_with_tie() {
        let v = vocab(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.6, 0.8]]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let f = VideoFeatures::from_rows(&[vec![s, s]]).unwrap();
        let out = retrieve_tokens(&f, &v, 2, Similarity::Dot).unwrap();
        assert_eq!(words(&out[0].entries), ["w3", "w0"]);
        assert!((out[0].entries[0].score - 0.989_949_49).abs() < 1e-6);
        assert!((out[0].entries[1].score - 0.707_106_78).abs() < 1e-6);
    }

    #[test]
    fn retrieval_errors() {
        let v = vocab(&[&[1.0, 0.0]]);
        let f = VideoFeatures::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(retrieve_tokens(&f, &v, 2, Similarity::Dot).is_err());
        assert!(retrieve_tokens(&f, &v, 0, Similarity::Dot).is_err());
        let f3 = VideoFeatures::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            retrieve_tokens(&f3, &v, 1, Similarity::Dot),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pooling_fixture() {
        let segs = [
            seg(0, &[("a", 0, 0.9), ("b", 1, 0.5)]),
            seg(1, &[("b", 1, 0.8), ("c", 2, 0.7)]),
        ];
        let out = pool_tokens(&segs, 5, 2).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(words(&out[0]), ["a", "b"]);
        assert_eq!(out[0][1].score, 0.8);
    }

    #[test]
    fn pooling_windows_do_not_interact() {
        let segs = [
            seg(0, &[("a", 0, 0.9)]),
            seg(1, &[("b", 1, 0.1)]),
            seg(2, &[("c", 2, 0.5)]),
        ];
        let out = pool_tokens(&segs, 2, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(words(&out[0]), ["a"]);
        assert_eq!(words(&out[1]), ["c"]);
        assert!(pool_tokens(&segs, 0, 1).is_err());
    }

    #[test]
    fn subsampling() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let f = VideoFeatures::from_rows(&rows).unwrap();
        let s = subsample_features(&f, 5).unwrap();
        assert_eq!(s.data(), &[0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(subsample_features(&f, 10).unwrap(), f);
        let short = VideoFeatures::from_rows(&rows[..5]).unwrap();
        assert_eq!(subsample_features(&short, 10).unwrap(), short);
        let odd = VideoFeatures::from_rows(&rows[..7]).unwrap();
        assert_eq!(subsample_features(&odd, 3).unwrap().segments(), 3);
    }

    #[test]
    fn rendering() {
        let one = vec![vec!["pan".to_owned(), "oil".to_owned()]];
        assert_eq!(render_token_sequence(&one, true), "first pan oil");
        let two = vec![vec!["pan".to_owned()], vec!["stir".to_owned()]];
        assert_eq!(render_token_sequence(&two, true), "first pan then stir");
        assert_eq!(render_token_sequence(&two, false), "pan stir");
    }

    fn brute_force(f: &VideoFeatures, v: &Vocabulary, k: usize) -> Vec<Vec<usize>> {
        (0..f.segments())
            .map(|t| {
                let q = Embedding::new(f.row(t).to_vec()).unwrap();
                let s = dot_scores(&q, v.embeddings()).unwrap();
                let mut idx: Vec<usize> = (0..s.len()).collect();
                // stable sort keeps lower index first on equal scores
                idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
                idx.truncate(k);
                idx
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force_with_ties(
            // small integer grid forces many exact ties
            rows in prop::collection::vec(prop::collection::vec(-2i32..3, 3), 1..60),
            query in prop::collection::vec(prop::collection::vec(-2i32..3, 3), 1..4),
            k_frac in 0.0f64..1.0,
        ) {
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let v = vocab(&refs);
            let k = 1 + ((v.len() - 1) as f64 * k_frac) as usize;
            let q: Vec<Vec<f64>> = query.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let f = VideoFeatures::from_rows(&q).unwrap();
            let got = retrieve_tokens(&f, &v, k, Similarity::Dot).unwrap();
            let want = brute_force(&f, &v, k);
            for (g, w) in got.iter().zip(&want) {
                let gi: Vec<usize> = g.entries.iter().map(|e| e.index).collect();
                prop_assert_eq!(&gi, w);
            }
        }

        #[test]
        fn pooled_words_come_from_their_window(
            scores in prop::collection::vec(prop::collection::vec((0usize..8, 0.0f64..1.0), 1..5), 1..12),
            kernel in 1usize..6,
            k in 1usize..5,
        ) {
            let segs: Vec<SegmentTokens> = scores.iter().enumerate().map(|(i, es)| {
                let mut entries: Vec<ScoredWord> = Vec::new();
                for &(w, s) in es {
                    if entries.iter().all(|e| e.index != w) {
                        entries.push(ScoredWord { word: format!("w{w}"), index: w, score: s });
                    }
                }
                entries.sort_by(by_score_then_index);
                SegmentTokens { segment_index: i, entries }
            }).collect();
            let pooled = pool_tokens(&segs, kernel, k).unwrap();
            for (wi, window) in pooled.iter().enumerate() {
                prop_assert!(window.len() <= k);
                let cands: Vec<&str> = segs[wi * kernel..((wi + 1) * kernel).min(segs.len())]
                    .iter().flat_map(|s| s.entries.iter().map(|e| e.word.as_str())).collect();
                for w in window {
                    prop_assert!(cands.contains(&w.word.as_str()));
                }
            }
        }
    }
}
