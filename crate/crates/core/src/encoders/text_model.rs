//! Trainable text model interface and the toy transformer backend.
//!
//! An external pretrained model plugs in by implementing [`TextModel`]:
//! tokenize, the embedding layer (token + position lookup followed by the
//! post-embedding norm), the transformer stack over embedded inputs, and
//! parameter access through its [`ParamStore`].

use std::collections::HashMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::embeddings::{Embedding, Pooling};
use crate::error::{Error, Result};
use crate::nn::{self, attention_bias, Block, Builder, LayerNorm, ParamStore};
use crate::text::words;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Word-level tokenizer with a closed vocabulary. Ids 0 and 1 are padding
/// and unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for WordTokenizer {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }
}

impl From<WordTokenizer> for Vec<String> {
    fn from(t: WordTokenizer) -> Self {
        t.words
    }
}

impl WordTokenizer {
    /// Sorted unique words of `texts` after the special tokens.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab: Vec<String> = texts.into_iter().flat_map(words).collect();
        vocab.sort();
        vocab.dedup();
        let mut all = vec!["[pad]".to_owned(), "[unk]".to_owned()];
        all.extend(vocab);
        Self::from(all)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for TextModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 128,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

pub trait TextModel: Send + Sync {
    fn hidden_dim(&self) -> usize;

    fn max_len(&self) -> usize;

    fn pooling(&self) -> Pooling;

    fn tokenize(&self, text: &str) -> Vec<u32>;

    /// Embedding layer: `ids`, `positions` u32 `[B, L]` → `[B, L, H]`,
    /// including the post-embedding normalization.
    fn embed(&self, ids: &Tensor, positions: &Tensor) -> Result<Tensor>;

    /// Normalization applied right after the embedding lookup.
    fn post_embedding_norm(&self) -> &LayerNorm;

    /// Transformer stack over already-embedded inputs `[B, L, H]`.
    fn encode_embedded(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor>;

    fn params(&self) -> &ParamStore;

    /// Same architecture and current weights, with separate parameters.
    fn fork(&self) -> Result<Box<dyn TextModel>>;

    /// Full forward pass with positions `0..L`.
    fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let pos = nn::position_ids(b, l, &vec![0; b], self.max_len())?;
        self.encode_embedded(&self.embed(ids, &pos)?, mask)
    }

    /// Tokenize and cut to `max_len`, keeping the prefix.
    fn tokenize_truncated(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenize(text);
        if ids.len() > self.max_len() {
            log::warn!(
                "truncating input of {} tokens to {}",
                ids.len(),
                self.max_len()
            );
            ids.truncate(self.max_len());
        }
        ids
    }
}

/// Small post-norm transformer trained from scratch.
pub struct ToyTextModel {
    config: TextModelConfig,
    tokenizer: WordTokenizer,
    store: ParamStore,
    tokens: nn::Embedding,
    positions: nn::Embedding,
    emb_ln: LayerNorm,
    blocks: Vec<Block>,
}

impl ToyTextModel {
    pub fn new(config: TextModelConfig, tokenizer: WordTokenizer) -> Result<Self> {
        Self::from_store(config, tokenizer, ParamStore::new())
    }

    /// Build around `store`, initializing any parameter it lacks.
    pub fn from_store(
        config: TextModelConfig,
        tokenizer: WordTokenizer,
        mut store: ParamStore,
    ) -> Result<Self> {
        if config.layers == 0 || config.max_len == 0 {
            return Err(Error::invalid("text model needs layers >= 1 and max_len >= 1"));
        }
        let mut rng = nn::seeded_rng(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let tokens = nn::Embedding::new(&mut b.push("tokens"), tokenizer.vocab_size(), config.hidden)?;
        let positions = nn::Embedding::new(&mut b.push("positions"), config.max_len, config.hidden)?;
        let emb_ln = LayerNorm::new(&mut b.push("emb_ln"), config.hidden)?;
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    &mut b.push(&format!("block{i}")),
                    config.hidden,
                    config.heads,
                    config.ffn,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tokenizer,
            store,
            tokens,
            positions,
            emb_ln,
            blocks,
        })
    }

    pub fn config(&self) -> &TextModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn fork_toy(&self) -> Result<Self> {
        Self::from_store(self.config, self.tokenizer.clone(), self.store.deep_clone()?)
    }
}

impl TextModel for ToyTextModel {
    fn hidden_dim(&self) -> usize {
        self.config.hidden
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn pooling(&self) -> Pooling {
        self.config.pooling
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text)
    }

    fn embed(&self, ids: &Tensor, positions: &Tensor) -> Result<Tensor> {
        let x = (self.tokens.forward(ids)? + self.positions.forward(positions)?)?;
        self.emb_ln.forward(&x)
    }

    fn post_embedding_norm(&self) -> &LayerNorm {
        &self.emb_ln
    }

    fn encode_embedded(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let bias = attention_bias(mask)?;
        let mut x = x.clone();
        for blk in &self.blocks {
            x = blk.forward(&x, &bias)?;
        }
        Ok(x)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn fork(&self) -> Result<Box<dyn TextModel>> {
        Ok(Box::new(self.fork_toy()?))
    }
}

/// Encode a batch of token-id rows: `(outputs [B, L, H], mask [B, L])`.
pub fn encode_batch(model: &dyn TextModel, rows: &[Vec<u32>]) -> Result<(Tensor, Tensor)> {
    let (ids, mask) = nn::pad_ids(rows, PAD_ID)?;
    Ok((model.forward(&ids, &mask)?, mask))
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    /// `[L, H]` contextualized outputs.
    pub tokens: Tensor,
    pub pooled: Embedding,
}

/// Per-token outputs and the pooled sentence embedding of one text.
pub fn encode_text(model: &dyn TextModel, text: &str) -> Result<EncodedText> {
    let ids = model.tokenize_truncated(text);
    if ids.is_empty() {
        return Err(Error::Empty("text has no tokens".into()));
    }
    let (out, mask) = encode_batch(model, &[ids])?;
    let pooled = nn::pool(&out, &mask, model.pooling())?;
    Ok(EncodedText {
        tokens: out.squeeze(0)?,
        pooled: Embedding::new(pooled.squeeze(0)?.to_vec1::<f64>()?)?,
    })
}
