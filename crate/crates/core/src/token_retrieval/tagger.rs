use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const BUNDLED_NOUNS: &str = include_str!("../../data/nouns.txt");
const BUNDLED_VERBS: &str = include_str!("../../data/verbs.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

/// Part-of-speech labelling of single lowercase words.
pub trait Tagger {
    fn tag(&self, word: &str) -> PosTag;
}

/// Closed-list tagger: a word is a noun or verb iff it is listed as one.
#[derive(Debug, Clone, Default)]
pub struct WordlistTagger {
    nouns: HashSet<String>,
    verbs: HashSet<String>,
}

fn lines(s: &str) -> impl Iterator<Item = String> + '_ {
    s.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

impl WordlistTagger {
    /// The word lists shipped with the crate.
    pub fn bundled() -> Self {
        Self {
            nouns: lines(BUNDLED_NOUNS).collect(),
            verbs: lines(BUNDLED_VERBS).collect(),
        }
    }

    pub fn from_lists<I, J, S, T>(nouns: I, verbs: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            nouns: nouns.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
            verbs: verbs.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
        }
    }

    /// Add entries from a `word<TAB>noun|verb` file.
    pub fn extend_from_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(word), Some(tag)) = (parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "expected `word<TAB>tag`".into(),
                });
            };
            let word = word.trim().to_lowercase();
            match tag.trim() {
                "noun" => self.nouns.insert(word),
                "verb" => self.verbs.insert(word),
                other => {
                    return Err(Error::Parse {
                        path: path.to_owned(),
                        line: i + 1,
                        message: format!("unknown tag `{other}`"),
                    })
                }
            };
        }
        Ok(())
    }

    /// Sorted listed nouns.
    pub fn nouns(&self) -> Vec<String> {
        let mut v: Vec<String> = self.nouns.iter().cloned().collect();
        v.sort();
        v
    }
}

impl Tagger for WordlistTagger {
    fn tag(&self, word: &str) -> PosTag {
        if self.nouns.contains(word) {
            PosTag::Noun
        } else if self.verbs.contains(word) {
            PosTag::Verb
        } else {
            PosTag::Other
        }
    }
}

/// Bundled stopword list used by the speech filter.
pub fn bundled_stopwords() -> HashSet<String> {
    lines(include_str!("../../data/stopwords.txt")).collect()
}
