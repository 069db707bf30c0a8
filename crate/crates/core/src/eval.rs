//! Open-ended, multiple-choice and retrieval metrics, plus the
//! answer/token overlap statistic.

use std::collections::HashSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::datasets::Task;
use crate::error::{Error, Result};
use crate::fusion::{FusionInput, FusionModel};
use crate::text::{normalize_answer, words};
use crate::train::{PreparedData, PreparedSample, Target};

/// Samples fused per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub config_hash: String,
}

impl EvalReport {
    /// Range `[0, 1]` for accuracies and overlap, `[0, 100]` for recall
    /// metrics (suffix `_pct`).
    pub fn new(metric: &str, value: f64, samples: usize, config_hash: &str) -> Result<Self> {
        let hi = if metric.ends_with("_pct") { 100.0 } else { 1.0 };
        if !(0.0..=hi).contains(&value) {
            return Err(Error::NonFinite(format!("{metric} = {value} outside [0, {hi}]")));
        }
        Ok(Self {
            metric: metric.to_owned(),
            value,
            samples,
            config_hash: config_hash.to_owned(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CreditRule {
    /// `min(1, m/2)` for multi-annotation samples, exact match otherwise.
    #[default]
    Auto,
    MinHalf,
    Exact,
}

impl std::str::FromStr for CreditRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "min-half" => Ok(Self::MinHalf),
            "exact" => Ok(Self::Exact),
            _ => Err(Error::invalid(format!("unknown credit rule `{s}`"))),
        }
    }
}

/// Credit for one prediction against its annotations; both sides are
/// normalized before comparison.
pub fn credit(prediction: &str, annotations: &[String], rule: CreditRule) -> f64 {
    let p = normalize_answer(prediction);
    let m = annotations.iter().filter(|a| normalize_answer(a) == p).count();
    let rule = match rule {
        CreditRule::Auto if annotations.len() > 1 => CreditRule::MinHalf,
        CreditRule::Auto => CreditRule::Exact,
        r => r,
    };
    match rule {
        CreditRule::MinHalf => (m as f64 / 2.0).min(1.0),
        _ => f64::from(m > 0),
    }
}

/// Unique normalized answer strings with their `G_A` embeddings.
pub struct AnswerCorpus {
    answers: Vec<String>,
    embeddings: Tensor,
}

impl AnswerCorpus {
    /// Every normalized annotation of `data`, in first-seen order.
    pub fn answers_of(data: &PreparedData) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &data.samples {
            if let Target::Answer { answers, .. } = &s.target {
                for a in answers {
                    if seen.insert(a.clone()) {
                        out.push(a.clone());
                    }
                }
            }
        }
        out
    }

    pub fn new(model: &FusionModel, answers: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let answers: Vec<String> = answers
            .into_iter()
            .map(|a| normalize_answer(&a))
            .filter(|a| seen.insert(a.clone()))
            .collect();
        if answers.is_empty() {
            return Err(Error::Empty("answer corpus is empty".into()));
        }
        let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
        let mut parts = Vec::new();
        for chunk in refs.chunks(EVAL_BATCH) {
            parts.push(model.encode_answers(chunk)?.detach());
        }
        Ok(Self {
            answers,
            embeddings: Tensor::cat(&parts, 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}

/// Fused embeddings `[N, H]` of prepared samples.
pub fn embed_samples(model: &FusionModel, samples: &[PreparedSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to embed".into()));
    }
    let mut parts = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs: Vec<&FusionInput> = chunk.iter().map(|s| &s.input).collect();
        parts.push(model.forward(&inputs)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenEndedResult {
    pub accuracy: f64,
    pub predictions: Vec<String>,
}

/// Accuracy from a score matrix `[N, A]` over `corpus` answers.
pub fn open_ended_from_scores(
    scores: &[Vec<f64>],
    corpus: &[String],
    annotations: &[Vec<String>],
    rule: CreditRule,
) -> Result<OpenEndedResult> {
    if corpus.is_empty() {
        return Err(Error::Empty("answer corpus is empty".into()));
    }
    if scores.is_empty() || scores.len() != annotations.len() {
        return Err(Error::DimensionMismatch {
            expected: annotations.len(),
            got: scores.len(),
        });
    }
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(scores.len());
    for (row, ann) in scores.iter().zip(annotations) {
        if row.len() != corpus.len() {
            return Err(Error::DimensionMismatch {
                expected: corpus.len(),
                got: row.len(),
            });
        }
        if ann.is_empty() {
            return Err(Error::invalid("sample without annotations"));
        }
        let pred = &corpus[argmax(row)];
        total += credit(pred, ann, rule);
        predictions.push(pred.clone());
    }
    Ok(OpenEndedResult {
        accuracy: total / scores.len() as f64,
        predictions,
    })
}

pub fn eval_open_ended(
    model: &FusionModel,
    data: &PreparedData,
    corpus: &AnswerCorpus,
    rule: CreditRule,
) -> Result<OpenEndedResult> {
    let annotations = data
        .samples
        .iter()
        .map(|s| match &s.target {
            Target::Answer { answers, .. } => Ok(answers.clone()),
            Target::Caption(_) => Err(Error::invalid("open-ended eval needs QA samples")),
        })
        .collect::<Result<Vec<_>>>()?;
    let e = embed_samples(model, &data.samples)?;
    let scores = e.matmul(&corpus.embeddings().t()?)?.to_vec2::<f64>()?;
    open_ended_from_scores(&scores, corpus.answers(), &annotations, rule)
}

/// `scores[0]` belongs to the positive; correct iff it is strictly highest.
pub fn multiple_choice_correct(scores: &[f64]) -> Result<bool> {
    if scores.len() != 4 {
        return Err(Error::invalid(format!(
            "multiple choice needs 4 candidates, got {}",
            scores.len()
        )));
    }
    Ok(scores[1..].iter().all(|&n| scores[0] > n))
}

pub fn multiple_choice_accuracy(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("no multiple-choice samples".into()));
    }
    let mut correct = 0usize;
    for r in rows {
        correct += usize::from(multiple_choice_correct(r)?);
    }
    Ok(correct as f64 / rows.len() as f64)
}

pub fn eval_multiple_choice(model: &FusionModel, data: &PreparedData) -> Result<f64> {
    let e = embed_samples(model, &data.samples)?.to_vec2::<f64>()?;
    let mut rows = Vec::with_capacity(e.len());
    for (s, ev) in data.samples.iter().zip(&e) {
        let Target::Answer { answers, negatives } = &s.target else {
            return Err(Error::invalid("multiple-choice eval needs QA samples"));
        };
        let mut cands: Vec<&str> = vec![answers[0].as_str()];
        cands.extend(negatives.iter().map(String::as_str));
        if cands.len() != 4 {
            return Err(Error::invalid(format!(
                "sample {} has {} candidates, expected 4",
                s.video_id,
                cands.len()
            )));
        }
        let a = model.encode_answers(&cands)?.to_vec2::<f64>()?;
        rows.push(a.iter().map(|r| r.iter().zip(ev).map(|(x, y)| x * y).sum()).collect());
    }
    multiple_choice_accuracy(&rows)
}

/// 1-based rank of `truth` in `scores`; items with equal score ahead of it
/// in corpus order rank before it.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub aver: f64,
}

/// Recall@{1,5,10} and their mean, in percent.
pub fn recall_metrics(ranks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    let at = |n: usize| 100.0 * ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64;
    let (r1, r5, r10) = (at(1), at(5), at(10));
    Ok(RetrievalMetrics {
        r1,
        r5,
        r10,
        aver: (r1 + r5 + r10) / 3.0,
    })
}

/// `scores[q][j]`: query `q` against corpus item `j`; `truth[q]` its
/// ground-truth item.
pub fn retrieval_from_scores(scores: &[Vec<f64>], truth: &[Option<usize>]) -> Result<RetrievalMetrics> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: scores.len(),
        });
    }
    let ranks = scores
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(q, (row, t))| match t {
            Some(t) if *t < row.len() => Ok(rank_of(row, *t)),
            _ => Err(Error::invalid(format!("query {q} has no ground-truth item"))),
        })
        .collect::<Result<Vec<_>>>()?;
    recall_metrics(&ranks)
}

/// Captions of `data` query the fused (video, speech) items of `data`; query
/// `i`'s ground truth is item `i`.
pub fn eval_retrieval(model: &FusionModel, data: &PreparedData) -> Result<RetrievalMetrics> {
    let captions = data
        .samples
        .iter()
        .map(|s| match &s.target {
            Target::Caption(c) => Ok(c.as_str()),
            Target::Answer { .. } => Err(Error::invalid("retrieval eval needs retrieval samples")),
        })
        .collect::<Result<Vec<_>>>()?;
    let items = embed_samples(model, &data.samples)?;
    let mut q = Vec::new();
    for chunk in captions.chunks(EVAL_BATCH) {
        q.push(model.encode_answers(chunk)?.detach());
    }
    let q = Tensor::cat(&q, 0)?;
    let scores = q.matmul(&items.t()?)?.to_vec2::<f64>()?;
    let truth: Vec<Option<usize>> = (0..captions.len()).map(Some).collect();
    retrieval_from_scores(&scores, &truth)
}

/// Fraction of samples whose normalized answer shares at least one word
/// with the retrieved tokens.
pub fn overlap_statistic(pairs: &[(String, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(answer, tokens)| {
            let toks: HashSet<String> = tokens.iter().flat_map(|t| words(t).collect::<Vec<_>>()).collect();
            words(&normalize_answer(answer)).any(|w| toks.contains(&w))
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Every metric that applies to `task`, as reports.
pub fn evaluate(
    model: &FusionModel,
    test: &PreparedData,
    corpus: Option<&AnswerCorpus>,
    rule: CreditRule,
    config_hash: &str,
) -> Result<Vec<EvalReport>> {
    let n = test.len();
    match test.task {
        Task::OpenQa => {
            let corpus = corpus.ok_or_else(|| Error::Empty("answer corpus is empty".into()))?;
            let r = eval_open_ended(model, test, corpus, rule)?;
            Ok(vec![EvalReport::new("accuracy", r.accuracy, n, config_hash)?])
        }
        Task::Mcqa => Ok(vec![EvalReport::new(
            "mc_accuracy",
            eval_multiple_choice(model, test)?,
            n,
            config_hash,
        )?]),
        Task::Retrieval => {
            let m = eval_retrieval(model, test)?;
            [("r1_pct", m.r1), ("r5_pct", m.r5), ("r10_pct", m.r10), ("aver_pct", m.aver)]
                .iter()
                .map(|(k, v)| EvalReport::new(k, *v, n, config_hash))
                .collect()
        }
    }
}
