//! Training loop, learning-rate schedule and few-shot subsampling.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{QaRecord, Records, RetrievalRecord, Task};
use crate::encoders::{video_encoder_fingerprint, FrozenVideoEncoder, WordTokenizer};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionInput, FusionModel, FusionVariant};
use crate::nn;
use crate::objectives::{nce_loss_tensor, symmetric_loss_tensor};
use crate::text::normalize_answer;
use crate::token_retrieval::{
    subsample_features, tokenize_video, Vocabulary, DEFAULT_K, DEFAULT_MAX_SEGMENTS,
    DEFAULT_POOL_KERNEL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub k: usize,
    pub pool_kernel: usize,
    pub max_segments: usize,
    pub variant: FusionVariant,
    pub use_asr: bool,
    pub fewshot_fraction: f64,
    /// Draw few-shot subsets as prefixes of one seeded permutation, so that
    /// smaller fractions are contained in larger ones.
    pub nested_fewshot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_decay_per_epoch: 0.9,
            batch_size: 256,
            epochs: 20,
            grad_clip_norm: 1.0,
            seed: 0,
            k: DEFAULT_K,
            pool_kernel: DEFAULT_POOL_KERNEL,
            max_segments: DEFAULT_MAX_SEGMENTS,
            variant: FusionVariant::TextText,
            use_asr: false,
            fewshot_fraction: 1.0,
            nested_fewshot: false,
        }
    }
}

impl TrainConfig {
    /// Settings for the toy model on synthetic data: small batches, a larger
    /// constant step size (the toy model starts from random weights) and
    /// short videos.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            lr_decay_per_epoch: 1.0,
            batch_size: 32,
            epochs: 30,
            k: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite()),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch.is_finite()),
            ("batch_size", self.batch_size > 0),
            ("epochs", self.epochs > 0),
            ("grad_clip_norm", self.grad_clip_norm > 0.0 && self.grad_clip_norm.is_finite()),
            ("k", self.k > 0),
            ("pool_kernel", self.pool_kernel > 0),
            ("max_segments", self.max_segments > 0),
            ("fewshot_fraction", self.fewshot_fraction > 0.0 && self.fewshot_fraction <= 1.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::invalid(format!("train config `{name}` out of range"))),
            None => Ok(()),
        }
    }

    /// Learning rate during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }

    /// Copy the forwarded fields (variant, retrieval settings, seed) into a
    /// model config.
    pub fn apply_to(&self, model: &mut FusionConfig) {
        model.variant = self.variant;
        model.tokens.k = self.k;
        model.tokens.pool_kernel = self.pool_kernel;
        model.tokens.max_segments = self.max_segments;
        model.seed = self.seed;
        model.text.seed = self.seed;
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        nn::hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Training target of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Normalized annotations (the first is the training answer) and
    /// normalized negatives for multiple choice.
    Answer {
        answers: Vec<String>,
        negatives: Vec<String>,
    },
    Caption(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub video_id: String,
    pub input: FusionInput,
    pub target: Target,
}

impl PreparedSample {
    /// The string `G_A` is trained to match.
    pub fn positive(&self) -> &str {
        match &self.target {
            Target::Answer { answers, .. } => &answers[0],
            Target::Caption(c) => c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: Task,
    pub samples: Vec<PreparedSample>,
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            task: self.task,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Most frequent normalized annotation first (ties keep annotation order),
/// followed by the remaining annotations in order.
pub fn order_answers(answers: &[String]) -> Vec<String> {
    let norm: Vec<String> = answers.iter().map(|a| normalize_answer(a)).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in &norm {
        *counts.entry(a).or_default() += 1;
    }
    let best = norm
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| counts[a.as_str()].cmp(&counts[b.as_str()]).then(j.cmp(i)))
        .map(|(i, _)| i)
        .expect("at least one answer");
    let mut out = vec![norm[best].clone()];
    out.extend(norm.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, a)| a.clone()));
    out
}

/// Where token variants get their video words from.
#[derive(Clone, Copy)]
pub enum TokenSource<'a> {
    /// Retrieve and pool from the features with the model's token settings.
    Retrieve(&'a Vocabulary),
    /// Pooled windows per video id, e.g. loaded from a `tokenize` run.
    Precomputed(&'a BTreeMap<String, Vec<Vec<String>>>),
}

/// Fetch features, subsample them and, for token variants, attach video
/// words.
pub fn prepare_records(
    records: &Records,
    task: Task,
    encoder: &dyn FrozenVideoEncoder,
    tokens: Option<TokenSource<'_>>,
    model: &FusionConfig,
    use_asr: bool,
) -> Result<PreparedData> {
    let video = |id: &str| -> Result<(crate::encoders::VideoFeatures, Vec<Vec<String>>)> {
        let raw = encoder.encode_video(id)?;
        let features = subsample_features(&raw, model.tokens.max_segments)?;
        let words = if model.variant.uses_text_tokens() {
            match tokens {
                Some(TokenSource::Retrieve(vocab)) => {
                    tokenize_video(&raw, vocab, &model.tokens)?.window_words()
                }
                Some(TokenSource::Precomputed(map)) => map
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingFeature(format!("no tokens for video `{id}`")))?,
                None => {
                    return Err(Error::invalid(format!(
                        "variant {} needs a vocabulary or precomputed tokens",
                        model.variant
                    )))
                }
            }
        } else {
            Vec::new()
        };
        Ok((features, words))
    };
    let samples = match (records, task) {
        (Records::Qa(recs), Task::OpenQa | Task::Mcqa) => recs
            .iter()
            .map(|r: &QaRecord| {
                let (features, video_words) = video(&r.video_id)?;
                Ok(PreparedSample {
                    video_id: r.video_id.clone(),
                    input: FusionInput {
                        question: r.question.clone(),
                        asr: if use_asr { r.asr.clone() } else { None },
                        features,
                        video_words,
                    },
                    target: Target::Answer {
                        answers: order_answers(&r.answers),
                        negatives: r
                            .negatives
                            .iter()
                            .flatten()
                            .map(|n| normalize_answer(n))
                            .collect(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?,
        (Records::Retrieval(recs), Task::Retrieval) => recs
            .iter()
            .map(|r: &RetrievalRecord| {
                let (features, video_words) = video(&r.video_id)?;
                Ok(PreparedSample {
                    video_id: r.video_id.clone(),
                    input: FusionInput {
                        question: r.speech.clone(),
                        asr: None,
                        features,
                        video_words,
                    },
                    target: Target::Caption(normalize_answer(&r.caption)),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::invalid(format!("records do not match task {task:?}"))),
    };
    if samples.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    Ok(PreparedData { task, samples })
}

/// Word tokenizer covering everything the model reads in `data`: questions,
/// speech, video words, temporal markers and target strings.
pub fn tokenizer_for(data: &PreparedData) -> WordTokenizer {
    let mut texts: Vec<&str> = vec!["first then"];
    for s in &data.samples {
        texts.push(&s.input.question);
        if let Some(a) = &s.input.asr {
            texts.push(a);
        }
        texts.extend(s.input.video_words.iter().flatten().map(String::as_str));
        match &s.target {
            Target::Answer { answers, negatives } => {
                texts.extend(answers.iter().chain(negatives).map(String::as_str))
            }
            Target::Caption(c) => texts.push(c),
        }
    }
    WordTokenizer::from_corpus(texts)
}

/// Seeded uniform sample without replacement of `ceil(fraction * N)` items,
/// in ascending index order.
pub fn fewshot_subsample(n: usize, fraction: f64, seed: u64, nested: bool) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let m = ((fraction * n as f64).ceil() as usize).min(n);
    if m == 0 {
        return Err(Error::Empty("few-shot subset is empty".into()));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let stream = if nested { seed } else { seed ^ fraction.to_bits() };
    let mut rng = nn::seeded_rng(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

pub fn fewshot_dataset(data: &PreparedData, cfg: &TrainConfig) -> Result<PreparedData> {
    let idx = fewshot_subsample(data.len(), cfg.fewshot_fraction, cfg.seed, cfg.nested_fewshot)?;
    Ok(data.subset(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub mean_loss: f64,
    /// Largest global gradient norm seen before and after clipping.
    pub max_grad_norm: f64,
    pub max_clipped_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub model_config_hash: String,
    pub seed: u64,
    pub variant: FusionVariant,
    pub train_samples: usize,
    pub iterations_per_epoch: usize,
    pub frozen_encoder_hash: String,
    pub epochs: Vec<EpochRecord>,
    #[serde(default)]
    pub eval: Vec<crate::eval::EvalReport>,
    /// Excluded from serialized records so identical runs write identical
    /// files; see `cli` for where timing is kept.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per line: a header, then one line per epoch and per
    /// eval report.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Line<'a> {
            Run {
                config_hash: &'a str,
                model_config_hash: &'a str,
                seed: u64,
                variant: FusionVariant,
                train_samples: usize,
                iterations_per_epoch: usize,
                frozen_encoder_hash: &'a str,
            },
            Epoch(&'a EpochRecord),
            Eval(&'a crate::eval::EvalReport),
        }
        let mut lines = vec![serde_json::to_string(&Line::Run {
            config_hash: &self.config_hash,
            model_config_hash: &self.model_config_hash,
            seed: self.seed,
            variant: self.variant,
            train_samples: self.train_samples,
            iterations_per_epoch: self.iterations_per_epoch,
            frozen_encoder_hash: &self.frozen_encoder_hash,
        })?];
        for e in &self.epochs {
            lines.push(serde_json::to_string(&Line::Epoch(e))?);
        }
        for r in &self.eval {
            lines.push(serde_json::to_string(&Line::Eval(r))?);
        }
        let mut s = lines.join("\n");
        s.push('\n');
        Ok(s)
    }
}

/// Called after every epoch with the epoch summary and the current model.
pub type EpochHook<'a> = Box<dyn FnMut(&EpochRecord, &FusionModel) -> Result<()> + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to save the model when a non-finite loss aborts training.
    pub snapshot_dir: Option<PathBuf>,
    pub on_epoch: Option<EpochHook<'a>>,
}

/// Score matrix and loss for one batch.
pub fn batch_loss<'a>(model: &FusionModel, batch: &[&'a PreparedSample], task: Task) -> Result<Tensor> {
    let inputs: Vec<&FusionInput> = batch.iter().map(|s| &s.input).collect();
    let fused = model.forward(&inputs)?;
    let t = model.config().temperature;
    match task {
        Task::Retrieval => {
            let captions: Vec<&str> = batch.iter().map(|s| s.positive()).collect();
            let answers = model.encode_answers(&captions)?;
            symmetric_loss_tensor(&fused.matmul(&answers.t()?)?, t)
        }
        Task::OpenQa | Task::Mcqa => {
            let mut candidates: Vec<&str> = Vec::new();
            let mut index: HashMap<&str, usize> = HashMap::new();
            let mut add = |a: &'a str| -> usize {
                *index.entry(a).or_insert_with(|| {
                    candidates.push(a);
                    candidates.len() - 1
                })
            };
            let labels: Vec<usize> = batch.iter().map(|s| add(s.positive())).collect();
            for s in batch {
                if let Target::Answer { negatives, .. } = &s.target {
                    negatives.iter().for_each(|n| {
                        add(n);
                    });
                }
            }
            let answers = model.encode_answers(&candidates)?;
            nce_loss_tensor(&fused.matmul(&answers.t()?)?, &labels, t)
        }
    }
}

fn global_norm(vars: &[Var], grads: &candle_core::backprop::GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Optimizer wrapper owning the trainable variables.
pub struct Stepper {
    vars: Vec<Var>,
    opt: AdamW,
    clip: f64,
}

impl Stepper {
    pub fn new(model: &FusionModel, learning_rate: f64, clip: f64) -> Result<Self> {
        let vars: Vec<Var> = model.named_parameters().into_iter().map(|(_, v)| v).collect();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self { vars, opt, clip })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    /// Backward, clip the global norm, update. Errors on a non-finite loss
    /// before touching the parameters.
    pub fn step(&mut self, loss: &Tensor) -> Result<StepStats> {
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss = {value}")));
        }
        let mut grads = loss.backward()?;
        let norm = global_norm(&self.vars, &grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm = {norm}")));
        }
        let clipped = if norm > self.clip {
            let scale = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
            global_norm(&self.vars, &grads)?
        } else {
            norm
        };
        self.opt.step(&grads)?;
        Ok(StepStats {
            loss: value,
            grad_norm: norm,
            clipped_grad_norm: clipped,
        })
    }
}

/// Sample order for one epoch of `iterations` batches over `n` items:
/// reshuffled passes over the data, concatenated until long enough.
fn epoch_order(rng: &mut ChaCha8Rng, n: usize, needed: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed + n);
    while out.len() < needed {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(rng);
        out.extend(pass);
    }
    out.truncate(needed);
    out
}

pub fn train(
    model: &FusionModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    frozen: &dyn FrozenVideoEncoder,
) -> Result<RunRecord> {
    train_with(model, data, cfg, frozen, TrainOptions::default())
}

/// Train in place. With `fewshot_fraction < 1` the model sees a seeded
/// subset but runs the full-data iteration count, cycling the subset.
pub fn train_with(
    model: &FusionModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    frozen: &dyn FrozenVideoEncoder,
    mut opts: TrainOptions<'_>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if cfg.variant != model.variant() {
        return Err(Error::invalid(format!(
            "train config variant {} differs from model variant {}",
            cfg.variant,
            model.variant()
        )));
    }
    let start = Instant::now();
    let frozen_before = video_encoder_fingerprint(frozen)?;

    let subset = fewshot_dataset(data, cfg)?;
    let batch = cfg.batch_size.min(data.len());
    let iterations = data.len().div_ceil(batch);
    let mut rng = nn::seeded_rng(cfg.seed);
    let mut stepper = Stepper::new(model, cfg.learning_rate, cfg.grad_clip_norm)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        stepper.set_learning_rate(lr);
        let order = epoch_order(&mut rng, subset.len(), iterations * batch.min(subset.len()));
        let mut total = 0.0;
        let (mut max_norm, mut max_clipped) = (0.0f64, 0.0f64);
        let chunks: Vec<&[usize]> = order.chunks(batch.min(subset.len())).collect();
        for (step, idx) in chunks.iter().enumerate() {
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &subset.samples[i]).collect();
            let loss = batch_loss(model, &samples, data.task)?;
            let stats = stepper.step(&loss).map_err(|e| {
                let message = match &opts.snapshot_dir {
                    Some(dir) => {
                        let saved = model.save_params(dir);
                        format!("{e}; batch {:?}; snapshot {}", idx, match saved {
                            Ok(()) => dir.display().to_string(),
                            Err(s) => format!("failed: {s}"),
                        })
                    }
                    None => format!("{e}; batch {:?}", idx),
                };
                Error::Numeric { epoch, step, message }
            })?;
            total += stats.loss;
            max_norm = max_norm.max(stats.grad_norm);
            max_clipped = max_clipped.max(stats.clipped_grad_norm);
        }
        let rec = EpochRecord {
            epoch,
            learning_rate: lr,
            steps: chunks.len(),
            mean_loss: total / chunks.len() as f64,
            max_grad_norm: max_norm,
            max_clipped_grad_norm: max_clipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.3e} grad {:.3}",
            rec.mean_loss,
            lr,
            max_norm
        );
        if let Some(hook) = opts.on_epoch.as_mut() {
            hook(&rec, model)?;
        }
        epochs.push(rec);
    }

    let frozen_after = video_encoder_fingerprint(frozen)?;
    if frozen_after != frozen_before {
        return Err(Error::invalid("frozen video encoder changed during training"));
    }
    Ok(RunRecord {
        config_hash: cfg.hash(),
        model_config_hash: model.config().hash(),
        seed: cfg.seed,
        variant: cfg.variant,
        train_samples: subset.len(),
        iterations_per_epoch: iterations,
        frozen_encoder_hash: frozen_after,
        epochs,
        eval: Vec::new(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
