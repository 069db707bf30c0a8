//! The four video/text fusion variants behind one model type.
//!
//! | variant       | video as             | fusion by                     |
//! |---------------|----------------------|-------------------------------|
//! | `ContiMulti`  | frozen features      | multimodal transformer `H`    |
//! | `ContiText`   | projected features   | the text model `G` itself     |
//! | `TextMulti`   | retrieved words      | `H` over two `G` encodings    |
//! | `TextText`    | retrieved words      | `G` over one joined sequence  |
//!
//! Every variant returns a `[B, hidden]` fused embedding; answers are
//! encoded by a separate answer model `G_A` forked from `G` at construction.
//!
//! Checkpoints are directories holding `manifest.json`, `text.safetensors`,
//! `answer.safetensors` and, when the variant has `H`, `P` or a width
//! adapter, `fusion.safetensors`.

use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::Embedding;
use crate::encoders::{
    encode_batch, TextModel, TextModelConfig, ToyTextModel, VideoFeatures, WordTokenizer,
};
use crate::error::{Error, Result};
use crate::nn::{
    self, Builder, FusionTransformer, FusionTransformerConfig, Linear, ParamStore,
};
use crate::token_retrieval::{render_token_sequence, TokenRetrievalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionVariant {
    ContiMulti,
    ContiText,
    TextMulti,
    TextText,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::ContiMulti,
        FusionVariant::ContiText,
        FusionVariant::TextMulti,
        FusionVariant::TextText,
    ];

    pub fn uses_text_tokens(self) -> bool {
        matches!(self, FusionVariant::TextMulti | FusionVariant::TextText)
    }

    pub fn has_multimodal_transformer(self) -> bool {
        matches!(self, FusionVariant::ContiMulti | FusionVariant::TextMulti)
    }

    pub fn has_projector(self) -> bool {
        self == FusionVariant::ContiText
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CONTI_MULTI" => Ok(Self::ContiMulti),
            "CONTI_TEXT" => Ok(Self::ContiText),
            "TEXT_MULTI" => Ok(Self::TextMulti),
            "TEXT_TEXT" => Ok(Self::TextText),
            _ => Err(Error::invalid(format!("unknown variant `{s}`"))),
        }
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::ContiMulti => "CONTI_MULTI",
            Self::ContiText => "CONTI_TEXT",
            Self::TextMulti => "TEXT_MULTI",
            Self::TextText => "TEXT_TEXT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub text: TextModelConfig,
    /// Dimension of the frozen video features.
    pub video_dim: usize,
    /// Factor applied to continuous features before they enter `H` or `P`;
    /// `None` means `sqrt(video_dim)`, which turns unit-norm features into
    /// unit per-coordinate scale.
    pub video_scale: Option<f64>,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub fusion_ffn: usize,
    /// Longest video (in segments) the position tables cover.
    pub max_video_segments: usize,
    /// Copy the text model's post-embedding norm into the projector's final norm.
    pub init_projector_norm: bool,
    /// Prefix pooled word windows with "first"/"then".
    pub temporal_markers: bool,
    pub temperature: f64,
    pub tokens: TokenRetrievalConfig,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::TextText,
            text: TextModelConfig::default(),
            video_dim: 64,
            video_scale: None,
            fusion_blocks: 2,
            fusion_heads: 4,
            fusion_ffn: 128,
            max_video_segments: 64,
            init_projector_norm: true,
            temporal_markers: false,
            temperature: 1.0,
            tokens: TokenRetrievalConfig::default(),
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn effective_video_scale(&self) -> f64 {
        self.video_scale.unwrap_or((self.video_dim as f64).sqrt())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        nn::hex(&Sha256::digest(json.as_bytes()))
    }
}

/// One sample as seen by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub question: String,
    pub asr: Option<String>,
    pub features: VideoFeatures,
    /// Pooled retrieved words per temporal window; empty for the
    /// continuous-feature variants.
    pub video_words: Vec<Vec<String>>,
}

/// Text channel order: question, then speech, then video words.
pub fn assemble_text(question: &str, asr: Option<&str>, video: Option<&str>) -> String {
    [Some(question), asr, video]
        .into_iter()
        .flatten()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub name: String,
    pub tensors: usize,
    pub scalars: usize,
}

pub struct FusionModel {
    config: FusionConfig,
    text: Box<dyn TextModel>,
    answer: Box<dyn TextModel>,
    store: ParamStore,
    fusion: Option<FusionTransformer>,
    projector: Option<FusionTransformer>,
    adapter: Option<Linear>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    text_model: String,
    config: FusionConfig,
    config_hash: String,
    tokenizer: WordTokenizer,
    parameters: Vec<ParameterGroup>,
}

impl FusionModel {
    /// Build around a text model `G`; `G_A` is forked from it.
    pub fn new(config: FusionConfig, text: Box<dyn TextModel>) -> Result<Self> {
        let answer = text.fork()?;
        Self::assemble(config, text, answer, ParamStore::new())
    }

    /// Build with a freshly initialized toy text model.
    pub fn with_toy_text_model(config: FusionConfig, tokenizer: WordTokenizer) -> Result<Self> {
        let text = ToyTextModel::new(config.text, tokenizer)?;
        Self::new(config, Box::new(text))
    }

    fn assemble(
        config: FusionConfig,
        text: Box<dyn TextModel>,
        answer: Box<dyn TextModel>,
        mut store: ParamStore,
    ) -> Result<Self> {
        let hidden = text.hidden_dim();
        if answer.hidden_dim() != hidden {
            return Err(Error::DimensionMismatch {
                expected: hidden,
                got: answer.hidden_dim(),
            });
        }
        if config.video_dim == 0 {
            return Err(Error::invalid("video_dim must be >= 1"));
        }
        let scale = config.effective_video_scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("video_scale {scale} must be positive")));
        }
        let v = config.variant;
        let mut rng = nn::seeded_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut b = Builder::new(&mut store, &mut rng);
        let positions = text.max_len() + config.max_video_segments;
        let fusion = if v.has_multimodal_transformer() {
            let cfg = FusionTransformerConfig {
                input_dim: hidden,
                width: hidden,
                blocks: config.fusion_blocks,
                heads: config.fusion_heads,
                ffn: config.fusion_ffn,
                max_positions: positions,
            };
            Some(FusionTransformer::new(&mut b.push("fusion"), &cfg)?)
        } else {
            None
        };
        let projector = if v.has_projector() {
            let cfg = FusionTransformerConfig {
                input_dim: config.video_dim,
                width: hidden,
                blocks: config.fusion_blocks,
                heads: config.fusion_heads,
                ffn: config.fusion_ffn,
                max_positions: positions,
            };
            Some(FusionTransformer::new(&mut b.push("projector"), &cfg)?)
        } else {
            None
        };
        let adapter = if v == FusionVariant::ContiMulti && config.video_dim != hidden {
            Some(Linear::new(&mut b.push("adapter"), config.video_dim, hidden)?)
        } else {
            None
        };
        if let Some(p) = &projector {
            if config.init_projector_norm {
                p.final_norm().copy_from(text.post_embedding_norm())?;
            }
        }
        let model = Self {
            config,
            text,
            answer,
            store,
            fusion,
            projector,
            adapter,
        };
        for g in model.parameter_report() {
            log::info!(
                "{}: parameter group {} with {} tensors / {} scalars",
                model.config.variant,
                g.name,
                g.tensors,
                g.scalars
            );
        }
        Ok(model)
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn variant(&self) -> FusionVariant {
        self.config.variant
    }

    pub fn embedding_dim(&self) -> usize {
        self.text.hidden_dim()
    }

    pub fn text_model(&self) -> &dyn TextModel {
        self.text.as_ref()
    }

    pub fn answer_model(&self) -> &dyn TextModel {
        self.answer.as_ref()
    }

    pub fn projector(&self) -> Option<&FusionTransformer> {
        self.projector.as_ref()
    }

    pub fn multimodal_transformer(&self) -> Option<&FusionTransformer> {
        self.fusion.as_ref()
    }

    /// Trainable groups: `text` (G), `answer` (G_A), and `fusion`/`projector`/
    /// `adapter` when the variant has them.
    pub fn parameter_report(&self) -> Vec<ParameterGroup> {
        let mut out = vec![
            ParameterGroup {
                name: "text".into(),
                tensors: self.text.params().len(),
                scalars: self.text.params().num_scalars(),
            },
            ParameterGroup {
                name: "answer".into(),
                tensors: self.answer.params().len(),
                scalars: self.answer.params().num_scalars(),
            },
        ];
        for group in ["adapter", "fusion", "projector"] {
            let vars: Vec<&Var> = self
                .store
                .iter()
                .filter(|(k, _)| k.split('.').next() == Some(group))
                .map(|(_, v)| v)
                .collect();
            if !vars.is_empty() {
                out.push(ParameterGroup {
                    name: group.into(),
                    tensors: vars.len(),
                    scalars: vars.iter().map(|v| v.elem_count()).sum(),
                });
            }
        }
        out
    }

    /// Every trainable parameter with a group-qualified name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (prefix, store) in [
            ("text", self.text.params()),
            ("answer", self.answer.params()),
            ("model", &self.store),
        ] {
            for (k, v) in store.iter() {
                out.push((format!("{prefix}.{k}"), v.clone()));
            }
        }
        out
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.text.params().fingerprint()?.as_bytes());
        h.update(self.answer.params().fingerprint()?.as_bytes());
        h.update(self.store.fingerprint()?.as_bytes());
        Ok(nn::hex(&h.finalize()))
    }

    fn text_channel(&self, input: &FusionInput) -> String {
        assemble_text(&input.question, input.asr.as_deref(), None)
    }

    fn video_text(&self, input: &FusionInput) -> String {
        render_token_sequence(&input.video_words, self.config.temporal_markers)
    }

    fn tokenize_nonempty(&self, text: &str) -> Result<Vec<u32>> {
        let ids = self.text.tokenize_truncated(text);
        if ids.is_empty() {
            return Err(Error::Empty(format!("text `{text}` has no tokens")));
        }
        Ok(ids)
    }

    /// Fused embeddings `[B, hidden]` for a batch.
    pub fn forward(&self, inputs: &[&FusionInput]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        match self.config.variant {
            FusionVariant::ContiMulti => self.forward_conti_multi(inputs),
            FusionVariant::ContiText => self.forward_conti_text(inputs),
            FusionVariant::TextMulti => self.forward_text_multi(inputs),
            FusionVariant::TextText => self.forward_text_text(inputs),
        }
    }

    fn padded_features(&self, inputs: &[&FusionInput]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let d = self.config.video_dim;
        let lens: Vec<usize> = inputs.iter().map(|i| i.features.segments()).collect();
        for (inp, &t) in inputs.iter().zip(&lens) {
            if t == 0 {
                return Err(Error::Empty("video has no segments".into()));
            }
            if inp.features.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: inp.features.dim(),
                });
            }
        }
        let t = *lens.iter().max().unwrap();
        let b = inputs.len();
        let mut data = vec![0.0; b * t * d];
        let mut mask = vec![0.0; b * t];
        for (i, inp) in inputs.iter().enumerate() {
            let src = inp.features.data();
            data[i * t * d..i * t * d + src.len()].copy_from_slice(src);
            mask[i * t..i * t + lens[i]].iter_mut().for_each(|m| *m = 1.0);
        }
        let scale = self.config.effective_video_scale();
        data.iter_mut().for_each(|x| *x *= scale);
        Ok((
            Tensor::from_vec(data, (b, t, d), &nn::device())?,
            Tensor::from_vec(mask, (b, t), &nn::device())?,
            lens,
        ))
    }

    /// Positions and segment ids for `[text | video]` where sample `i`'s
    /// video positions continue after its own text length.
    fn joint_layout(
        &self,
        text_lens: &[usize],
        lt: usize,
        lv: usize,
        max_positions: usize,
    ) -> Result<(Tensor, Tensor)> {
        let b = text_lens.len();
        let text_pos = nn::position_ids(b, lt, &vec![0; b], max_positions)?;
        let video_pos = nn::position_ids(b, lv, text_lens, max_positions)?;
        let pos = Tensor::cat(&[&text_pos, &video_pos], 1)?;
        let seg_text = Tensor::zeros((b, lt), candle_core::DType::U32, &nn::device())?;
        let seg_video = Tensor::ones((b, lv), candle_core::DType::U32, &nn::device())?;
        let seg = Tensor::cat(&[&seg_text, &seg_video], 1)?;
        Ok((pos, seg))
    }

    fn encode_text_channel(&self, inputs: &[&FusionInput]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let rows = inputs
            .iter()
            .map(|i| self.tokenize_nonempty(&self.text_channel(i)))
            .collect::<Result<Vec<_>>>()?;
        let lens = rows.iter().map(Vec::len).collect();
        let (out, mask) = encode_batch(self.text.as_ref(), &rows)?;
        Ok((out, mask, lens))
    }

    fn fuse_with_h(
        &self,
        text: (Tensor, Tensor, Vec<usize>),
        video: (Tensor, Tensor),
    ) -> Result<Tensor> {
        let h = self.fusion.as_ref().expect("variant has H");
        let (t_out, t_mask, t_lens) = text;
        let (v_out, v_mask) = video;
        let (lt, lv) = (t_out.dims()[1], v_out.dims()[1]);
        let (pos, seg) = self.joint_layout(&t_lens, lt, lv, h.max_positions())?;
        let x = Tensor::cat(&[&t_out, &v_out], 1)?;
        let mask = Tensor::cat(&[&t_mask, &v_mask], 1)?;
        let out = h.forward(&x, &pos, &seg, &mask)?;
        nn::pool(&out, &mask, self.text.pooling())
    }

    fn forward_conti_multi(&self, inputs: &[&FusionInput]) -> Result<Tensor> {
        let (feats, v_mask, _) = self.padded_features(inputs)?;
        let text = self.encode_text_channel(inputs)?;
        let video = match &self.adapter {
            Some(a) => a.forward(&feats)?,
            None => feats,
        };
        self.fuse_with_h(text, (video, v_mask))
    }

    fn forward_conti_text(&self, inputs: &[&FusionInput]) -> Result<Tensor> {
        let p = self.projector.as_ref().expect("variant has P");
        let (feats, v_mask, _) = self.padded_features(inputs)?;
        let rows = inputs
            .iter()
            .map(|i| self.tokenize_nonempty(&self.text_channel(i)))
            .collect::<Result<Vec<_>>>()?;
        let t_lens: Vec<usize> = rows.iter().map(Vec::len).collect();
        let (ids, t_mask) = nn::pad_ids(&rows, crate::encoders::PAD_ID)?;
        let (b, lt) = ids.dims2()?;
        let text_pos = nn::position_ids(b, lt, &vec![0; b], self.text.max_len())?;
        let embedded = self.text.embed(&ids, &text_pos)?;

        let lv = feats.dims()[1];
        let video_pos = nn::position_ids(b, lv, &t_lens, p.max_positions())?;
        let video_seg = Tensor::ones((b, lv), candle_core::DType::U32, &nn::device())?;
        let projected = p.forward(&feats, &video_pos, &video_seg, &v_mask)?;

        let x = Tensor::cat(&[&embedded, &projected], 1)?;
        let mask = Tensor::cat(&[&t_mask, &v_mask], 1)?;
        let out = self.text.encode_embedded(&x, &mask)?;
        nn::pool(&out, &mask, self.text.pooling())
    }

    fn forward_text_multi(&self, inputs: &[&FusionInput]) -> Result<Tensor> {
        let text = self.encode_text_channel(inputs)?;
        let rows: Vec<Vec<u32>> = inputs
            .iter()
            .map(|i| self.text.tokenize_truncated(&self.video_text(i)))
            .collect();
        if rows.iter().any(Vec::is_empty) {
            log::debug!("video branch empty for some samples; fusing the text branch only");
        }
        let (v_out, v_mask) = encode_batch(self.text.as_ref(), &rows)?;
        self.fuse_with_h(text, (v_out, v_mask))
    }

    fn forward_text_text(&self, inputs: &[&FusionInput]) -> Result<Tensor> {
        let rows = inputs
            .iter()
            .map(|i| {
                let video = self.video_text(i);
                self.tokenize_nonempty(&assemble_text(&i.question, i.asr.as_deref(), Some(&video)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (out, mask) = encode_batch(self.text.as_ref(), &rows)?;
        nn::pool(&out, &mask, self.text.pooling())
    }

    /// Fused embedding of one sample.
    pub fn fuse(&self, input: &FusionInput) -> Result<Embedding> {
        let t = self.forward(&[input])?;
        Embedding::new(t.squeeze(0)?.to_vec1::<f64>()?)
    }

    fn fuse_as(&self, variant: FusionVariant, input: &FusionInput) -> Result<Embedding> {
        if self.config.variant != variant {
            return Err(Error::invalid(format!(
                "model is {}, not {variant}",
                self.config.variant
            )));
        }
        self.fuse(input)
    }

    pub fn fuse_conti_multi(&self, input: &FusionInput) -> Result<Embedding> {
        self.fuse_as(FusionVariant::ContiMulti, input)
    }

    pub fn fuse_conti_text(&self, input: &FusionInput) -> Result<Embedding> {
        self.fuse_as(FusionVariant::ContiText, input)
    }

    pub fn fuse_text_multi(&self, input: &FusionInput) -> Result<Embedding> {
        self.fuse_as(FusionVariant::TextMulti, input)
    }

    pub fn fuse_text_text(&self, input: &FusionInput) -> Result<Embedding> {
        self.fuse_as(FusionVariant::TextText, input)
    }

    /// Answer embeddings `[A, hidden]` from `G_A`.
    pub fn encode_answers(&self, answers: &[&str]) -> Result<Tensor> {
        let rows = answers
            .iter()
            .map(|a| {
                let ids = self.answer.tokenize_truncated(a);
                if ids.is_empty() {
                    Err(Error::Empty(format!("answer `{a}` has no tokens")))
                } else {
                    Ok(ids)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("no answers".into()));
        }
        let (out, mask) = encode_batch(self.answer.as_ref(), &rows)?;
        nn::pool(&out, &mask, self.answer.pooling())
    }

    pub fn encode_answer(&self, answer: &str) -> Result<Embedding> {
        let t = self.encode_answers(&[answer])?;
        Embedding::new(t.squeeze(0)?.to_vec1::<f64>()?)
    }

    pub fn save(&self, dir: &Path, tokenizer: &WordTokenizer) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.text.params().save(&dir.join("text.safetensors"))?;
        self.answer.params().save(&dir.join("answer.safetensors"))?;
        if !self.store.is_empty() {
            self.store.save(&dir.join("fusion.safetensors"))?;
        }
        let manifest = CheckpointManifest {
            format: 1,
            text_model: "toy".into(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            tokenizer: tokenizer.clone(),
            parameters: self.parameter_report(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Parameters only, without the manifest; used for diagnostic snapshots.
    pub fn save_params(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.text.params().save(&dir.join("text.safetensors"))?;
        self.answer.params().save(&dir.join("answer.safetensors"))?;
        if !self.store.is_empty() {
            self.store.save(&dir.join("fusion.safetensors"))?;
        }
        Ok(())
    }

    /// Reload a checkpoint written by [`FusionModel::save`] (toy text model).
    pub fn load(dir: &Path) -> Result<(Self, WordTokenizer)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.text_model != "toy" {
            return Err(Error::invalid(format!(
                "cannot reload text model kind `{}`",
                manifest.text_model
            )));
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::invalid("checkpoint config hash mismatch"));
        }
        let cfg = manifest.config;
        let g = ToyTextModel::new(cfg.text, manifest.tokenizer.clone())?;
        let ga = ToyTextModel::new(cfg.text, manifest.tokenizer.clone())?;
        g.params().load_into(&dir.join("text.safetensors"))?;
        ga.params().load_into(&dir.join("answer.safetensors"))?;
        let model = Self::assemble(cfg, Box::new(g), Box::new(ga), ParamStore::new())?;
        if !model.store.is_empty() {
            model.store.load_into(&dir.join("fusion.safetensors"))?;
        }
        Ok((model, manifest.tokenizer))
    }
}
