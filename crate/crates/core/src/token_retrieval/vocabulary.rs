use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tagger::{PosTag, Tagger};
use crate::embeddings::{Embedding, EmbeddingMatrix};
use crate::encoders::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::text::words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabularySource {
    /// Nouns and verbs parsed from a dataset's questions and answers.
    AnswerWord,
    /// A plain external word list.
    ExternalList,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabMeta {
    source: VocabularySource,
    size: usize,
    dim: usize,
}

/// Retrieval vocabulary: unique words with their frozen word vectors, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    embeddings: EmbeddingMatrix,
    source: VocabularySource,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_parts(
        words: Vec<String>,
        embeddings: EmbeddingMatrix,
        source: VocabularySource,
    ) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Empty("vocabulary has no words".into()));
        }
        if embeddings.rows() != words.len() {
            return Err(Error::DimensionMismatch {
                expected: words.len(),
                got: embeddings.rows(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            words,
            embeddings,
            source,
            index,
        })
    }

    /// Embed `words` (kept in the given order) with the frozen text encoder.
    pub fn embed(
        words: Vec<String>,
        encoder: &dyn FrozenTextEncoder,
        source: VocabularySource,
    ) -> Result<Self> {
        let rows = words
            .iter()
            .map(|w| encoder.encode_word(w))
            .collect::<Result<Vec<Embedding>>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("vocabulary has no words".into()));
        }
        let matrix = EmbeddingMatrix::from_rows(&rows, Some(words.clone()))?;
        Self::from_parts(words, matrix, source)
    }

    /// Answer-word vocabulary: the sorted union of nouns and verbs found in
    /// `corpus`, lowercased and deduplicated.
    pub fn build<S: AsRef<str>>(
        corpus: &[S],
        tagger: &dyn Tagger,
        encoder: &dyn FrozenTextEncoder,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("vocabulary corpus is empty".into()));
        }
        let found: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| words(s.as_ref()).collect::<Vec<_>>())
            .filter(|w| matches!(tagger.tag(w), PosTag::Noun | PosTag::Verb))
            .collect();
        if found.is_empty() {
            return Err(Error::Empty("corpus contains no nouns or verbs".into()));
        }
        Self::embed(found.into_iter().collect(), encoder, VocabularySource::AnswerWord)
    }

    /// External-list vocabulary: one word per line, lowercased, first
    /// occurrence kept.
    pub fn from_word_list(text: &str, encoder: &dyn FrozenTextEncoder) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut list = Vec::new();
        for w in text.lines().map(|l| l.trim().to_lowercase()) {
            if !w.is_empty() && seen.insert(w.clone()) {
                list.push(w);
            }
        }
        Self::embed(list, encoder, VocabularySource::ExternalList)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn source(&self) -> VocabularySource {
        self.source
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Writes `words.txt`, `embeddings.bin` (+ `.keys`) and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let wp = dir.join("words.txt");
        let mut body = self.words.join("\n");
        body.push('\n');
        fs::write(&wp, body).map_err(|e| Error::io(&wp, e))?;
        self.embeddings.save(&dir.join("embeddings.bin"))?;
        let meta = VocabMeta {
            source: self.source,
            size: self.len(),
            dim: self.dim(),
        };
        let mp = dir.join("vocab.json");
        fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let wp = dir.join("words.txt");
        let words: Vec<String> = fs::read_to_string(&wp)
            .map_err(|e| Error::io(&wp, e))?
            .lines()
            .map(str::to_owned)
            .collect();
        let mp = dir.join("vocab.json");
        let meta: VocabMeta =
            serde_json::from_str(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
        let embeddings = EmbeddingMatrix::load(&dir.join("embeddings.bin"))?;
        if embeddings.keys() != Some(words.as_slice()) {
            return Err(Error::invalid("embedding keys disagree with words.txt"));
        }
        let v = Self::from_parts(words, embeddings, meta.source)?;
        if v.len() != meta.size || v.dim() != meta.dim {
            return Err(Error::invalid("vocab.json disagrees with stored vocabulary"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{SyntheticEncoderConfig, SyntheticEncoderPair};
    use crate::token_retrieval::WordlistTagger;

    fn enc() -> SyntheticEncoderPair {
        SyntheticEncoderPair::new(SyntheticEncoderConfig::default()).unwrap()
    }

    #[test]
    fn builds_nouns_and_verbs() {
        let v = Vocabulary::build(&["the cat eats fish"], &WordlistTagger::bundled(), &enc()).unwrap();
        assert_eq!(v.words(), &["cat", "eats", "fish"]);
        assert_eq!(v.source(), VocabularySource::AnswerWord);
        assert_eq!(v.embeddings().rows(), 3);
    }

    #[test]
    fn duplicates_and_order_do_not_matter() {
        let t = WordlistTagger::bundled();
        let a = Vocabulary::build(&["the cat eats fish", "a dog"], &t, &enc()).unwrap();
        let b = Vocabulary::build(
            &["a dog", "the cat eats fish", "the cat eats fish"],
            &t,
            &enc(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_on_empty_or_contentless_corpus() {
        let t = WordlistTagger::bundled();
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, &t, &enc()).is_err());
        assert!(Vocabulary::build(&["the of and"], &t, &enc()).is_err());
    }

    #[test]
    fn external_list_and_round_trip() {
        let v = Vocabulary::from_word_list("Pan\noil\n\npan\nstir\n", &enc()).unwrap();
        assert_eq!(v.words(), &["pan", "oil", "stir"]);
        let dir = tempfile::tempdir().unwrap();
        v.save(dir.path()).unwrap();
        assert_eq!(Vocabulary::load(dir.path()).unwrap(), v);
    }
}
