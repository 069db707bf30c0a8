//! Command-line interface.
//!
//! Every command writes under an output directory (`--out`, or
//! `$TEXTVID_OUT/<command>` when the flag is absent) and leaves a
//! `manifest.json` there with the command line, resolved configuration,
//! input digests and artifact checksums. Wall-clock timing goes to a separate
//! `timing.json` so that identical runs produce identical manifests.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{generate_synthetic, DatasetDir, Records, SyntheticSpec, Task};
use crate::encoders::{FrozenVideoEncoder, PrecomputedFeatureStore, SyntheticEncoderPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, overlap_statistic, AnswerCorpus, CreditRule, EvalReport};
use crate::fusion::{FusionConfig, FusionModel, FusionVariant};
use crate::nn::hex;
use crate::token_retrieval::{tokenize_video, TokenRetrievalConfig, Vocabulary, WordlistTagger};
use crate::train::{
    order_answers, prepare_records, tokenizer_for, train_with, PreparedData, TokenSource,
    TrainConfig, TrainOptions,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TEXTVID_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "textvid", version, about = "Multi-channel video-language retrieval")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a word vocabulary with frozen text embeddings.
    BuildVocab(BuildVocabArgs),
    /// Retrieve and pool video words for every video of a dataset.
    Tokenize(TokenizeArgs),
    /// Generate a planted-signal dataset.
    Synth(SynthArgs),
    /// Train one variant and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train on seeded subsets with the full-data iteration count.
    Fewshot(FewshotArgs),
    /// Share of samples whose answer overlaps the retrieved video words.
    Overlap(OverlapArgs),
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory [default: $TEXTVID_OUT/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sentences to parse instead of the dataset's corpus.txt.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Use this word list as is instead of parsing a corpus.
    #[arg(long, conflicts_with = "corpus")]
    word_list: Option<PathBuf>,
    /// Extra `word<TAB>noun|verb` lines for the tagger.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct TokenArgs {
    /// Words kept per segment.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pool_kernel: Option<usize>,
    #[arg(long)]
    max_segments: Option<usize>,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Run configuration; its [model.tokens] table supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tokens: TokenArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML with [train], [model] and [eval] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults the config file and flags are applied on.
    #[arg(long, value_enum, default_value = "reference")]
    profile: Profile,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary directory; token variants retrieve words with it.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output of `tokenize`; used instead of --vocab when given.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    variant: Option<FusionVariant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    use_asr: Option<bool>,
    #[arg(long)]
    credit_rule: Option<CreditRule>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    fewshot_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated fractions in (0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// Comma-separated variants [default: all four].
    #[arg(long, value_delimiter = ',')]
    variants: Vec<FusionVariant>,
    /// Nest smaller subsets inside larger ones.
    #[arg(long)]
    nested: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: Task,
    /// Line-delimited report [default: <out>/report.jsonl].
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    credit_rule: Option<CreditRule>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct OverlapArgs {
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split's answers to compare.
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Profile {
    /// Full-scale defaults: batch 256, step size 5e-5 decaying 0.9 per epoch.
    Reference,
    /// Small batches and constant step size for the toy model.
    Desk,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub credit_rule: CreditRule,
}

/// Everything a training run depends on besides its data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: FusionConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    /// Overlay a TOML document on `self`; keys absent from the file keep
    /// their current value.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let over: toml::Value =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let mut base = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        merge(&mut base, over);
        base.try_into().map_err(|e: toml::de::Error| Error::invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Combined hash of the training and model settings.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub resolved_config: serde_json::Value,
    /// Digest of each input file or directory, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written, keyed by path relative to the output
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Relative path → sha256 for every file under `dir`, skipping `skip`.
pub fn checksums(dir: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f
            .strip_prefix(dir)
            .expect("under dir")
            .to_string_lossy()
            .replace('\\', "/");
        if skip.contains(&rel.as_str()) {
            continue;
        }
        out.insert(rel, sha256_file(&f)?);
    }
    Ok(out)
}

/// Digest of a file, or of all files under a directory except the
/// wall-clock record another command may have left there.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let sums = checksums(path, &[TIMING])?;
        let mut h = Sha256::new();
        for (k, v) in sums {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        Ok(hex(&h.finalize()))
    } else {
        sha256_file(path)
    }
}

const TIMING: &str = "timing.json";
const VOLATILE: [&str; 2] = ["manifest.json", TIMING];

struct Output {
    dir: PathBuf,
    command: &'static str,
    argv: Vec<String>,
    inputs: BTreeMap<String, String>,
    start: Instant,
}

impl Output {
    fn new(arg: &OutArg, command: &'static str, argv: &[String]) -> Result<Self> {
        let dir = match &arg.out {
            Some(d) => d.clone(),
            None => match std::env::var_os(OUT_ENV) {
                Some(root) => PathBuf::from(root).join(command),
                None => {
                    return Err(Error::invalid(format!(
                        "no output directory: pass --out or set {OUT_ENV}"
                    )))
                }
            },
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            command,
            argv: argv.to_vec(),
            inputs: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_owned(), digest_path(path)?);
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, body: &str) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    fn finish(self, config_hash: &str, seed: Option<u64>, resolved: serde_json::Value) -> Result<Manifest> {
        let timing = serde_json::json!({ "wall_clock_seconds": self.start.elapsed().as_secs_f64() });
        self.write(TIMING, &serde_json::to_string_pretty(&timing)?)?;
        let manifest = Manifest {
            command: self.command.to_owned(),
            argv: self.argv.clone(),
            config_hash: config_hash.to_owned(),
            seed,
            resolved_config: resolved,
            inputs: self.inputs.clone(),
            artifacts: checksums(&self.dir, &VOLATILE)?,
        };
        self.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
        log::info!("{} done; outputs in {}", self.command, self.dir.display());
        Ok(manifest)
    }
}

fn hash_json(v: &impl Serialize) -> String {
    let json = serde_json::to_string(v).expect("serializable");
    hex(&Sha256::digest(json.as_bytes()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One line of `tokens.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLine {
    pub video_id: String,
    pub windows: Vec<Vec<String>>,
    pub segments: Vec<Vec<String>>,
}

pub fn load_tokens(path: &Path) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: TokenLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(t.video_id, t.windows);
    }
    Ok(out)
}

fn synthetic_text_encoder(data: &DatasetDir) -> Result<SyntheticEncoderPair> {
    match data.meta()?.encoder {
        Some(cfg) => SyntheticEncoderPair::new(cfg),
        None => Err(Error::Data(
            "dataset has no frozen text encoder settings to embed vocabulary words with".into(),
        )),
    }
}

fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let mut out = Output::new(&a.out, "synth", argv)?;
    let mut spec = SyntheticSpec::default();
    if let Some(p) = &a.spec {
        out.input("spec", p)?;
        spec = SyntheticSpec::from_toml(&read_text(p)?)?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(n) = a.train_samples {
        spec.train_samples = n;
    }
    if let Some(n) = a.test_samples {
        spec.test_samples = n;
    }
    log::info!("synthetic spec {}", serde_json::to_string(&spec)?);
    let ds = generate_synthetic(&spec)?;
    ds.write(&out.dir)?;
    out.finish(&hash_json(&spec), Some(spec.seed), serde_json::to_value(&spec)?)?;
    Ok(())
}

fn cmd_build_vocab(a: &BuildVocabArgs, argv: &[String]) -> Result<()> {
    let mut out = Output::new(&a.out, "build-vocab", argv)?;
    let data = DatasetDir::new(&a.data);
    let encoder = synthetic_text_encoder(&data)?;
    out.input("dataset", &data.meta_path())?;
    let vocab = if let Some(list) = &a.word_list {
        out.input("word_list", list)?;
        Vocabulary::from_word_list(&read_text(list)?, &encoder)?
    } else {
        let mut tagger = WordlistTagger::bundled();
        if let Some(lex) = &a.lexicon {
            out.input("lexicon", lex)?;
            tagger.extend_from_file(lex)?;
        }
        let corpus = match &a.corpus {
            Some(p) => {
                out.input("corpus", p)?;
                read_text(p)?.lines().map(String::from).collect()
            }
            None => {
                out.input("corpus", &data.corpus_path())?;
                data.corpus()?
            }
        };
        Vocabulary::build(&corpus, &tagger, &encoder)?
    };
    log::info!("vocabulary of {} words", vocab.len());
    vocab.save(&out.dir)?;
    let resolved = serde_json::json!({ "words": vocab.len(), "source": vocab.source() });
    out.finish(&hash_json(&resolved), None, resolved)?;
    Ok(())
}

fn cmd_tokenize(a: &TokenizeArgs, argv: &[String]) -> Result<()> {
    let mut out = Output::new(&a.out, "tokenize", argv)?;
    let mut cfg: TokenRetrievalConfig = match &a.config {
        Some(p) => {
            out.input("config", p)?;
            RunConfig::default().overlay_toml(&read_text(p)?)?.model.tokens
        }
        None => TokenRetrievalConfig::default(),
    };
    if let Some(k) = a.tokens.k {
        cfg.k = k;
    }
    if let Some(p) = a.tokens.pool_kernel {
        cfg.pool_kernel = p;
    }
    if let Some(m) = a.tokens.max_segments {
        cfg.max_segments = m;
    }
    log::info!("token settings {}", serde_json::to_string(&cfg)?);
    let data = DatasetDir::new(&a.data);
    let store = data.features()?;
    let vocab = Vocabulary::load(&a.vocab)?;
    out.input("features", &data.features_manifest())?;
    out.input("vocab", &a.vocab)?;
    let mut lines = String::new();
    for id in store.video_ids() {
        let t = tokenize_video(&store.encode_video(&id)?, &vocab, &cfg)?;
        let line = TokenLine {
            video_id: id,
            windows: t.window_words(),
            segments: t
                .per_segment
                .iter()
                .map(|s| s.entries.iter().map(|e| e.word.clone()).collect())
                .collect(),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    out.write("tokens.jsonl", &lines)?;
    out.finish(&hash_json(&cfg), None, serde_json::to_value(cfg)?)?;
    Ok(())
}

fn resolve_run(a: &RunArgs, out: &mut Output) -> Result<RunConfig> {
    let base = match a.profile {
        Profile::Reference => RunConfig::default(),
        Profile::Desk => RunConfig::desk(),
    };
    let mut cfg = match &a.config {
        Some(p) => {
            out.input("config", p)?;
            base.overlay_toml(&read_text(p)?)?
        }
        None => base,
    };
    let t = &mut cfg.train;
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(u) = a.use_asr {
        t.use_asr = u;
    }
    if let Some(r) = a.credit_rule {
        cfg.eval.credit_rule = r;
    }
    Ok(cfg)
}

struct LoadedRun {
    task: Task,
    store: PrecomputedFeatureStore,
    train: PreparedData,
    test: PreparedData,
}

fn load_tokens_or_vocab(
    vocab: &Option<PathBuf>,
    tokens: &Option<PathBuf>,
    variant: FusionVariant,
    out: &mut Output,
) -> Result<(Option<Vocabulary>, Option<BTreeMap<String, Vec<Vec<String>>>>)> {
    if !variant.uses_text_tokens() {
        return Ok((None, None));
    }
    if let Some(t) = tokens {
        out.input("tokens", t)?;
        return Ok((None, Some(load_tokens(t)?)));
    }
    match vocab {
        Some(v) => {
            out.input("vocab", v)?;
            Ok((Some(Vocabulary::load(v)?), None))
        }
        None => Err(Error::invalid(format!(
            "variant {variant} needs --vocab or --tokens"
        ))),
    }
}

fn source<'a>(
    vocab: &'a Option<Vocabulary>,
    tokens: &'a Option<BTreeMap<String, Vec<Vec<String>>>>,
) -> Option<TokenSource<'a>> {
    match (vocab, tokens) {
        (_, Some(t)) => Some(TokenSource::Precomputed(t)),
        (Some(v), None) => Some(TokenSource::Retrieve(v)),
        (None, None) => None,
    }
}

fn load_run(a: &RunArgs, cfg: &mut RunConfig, out: &mut Output) -> Result<LoadedRun> {
    let data = DatasetDir::new(&a.data);
    let task = data.meta()?.task;
    let store = data.features()?;
    let dim = store.manifest().dim;
    if cfg.model.video_dim != dim {
        log::info!("video_dim set to the feature dimension {dim}");
        cfg.model.video_dim = dim;
    }
    cfg.train.apply_to(&mut cfg.model);
    out.input("data", &a.data)?;
    let (vocab, tokens) = load_tokens_or_vocab(&a.vocab, &a.tokens, cfg.train.variant, out)?;
    let src = source(&vocab, &tokens);
    let train = prepare_records(&data.train()?, task, &store, src, &cfg.model, cfg.train.use_asr)?;
    let test = prepare_records(&data.test()?, task, &store, src, &cfg.model, cfg.train.use_asr)?;
    Ok(LoadedRun {
        task,
        store,
        train,
        test,
    })
}

fn log_config(cfg: &RunConfig) -> Result<()> {
    log::info!("resolved config (hash {}):\n{}", cfg.hash(), cfg.to_toml()?);
    Ok(())
}

/// Train, evaluate, and write checkpoint plus run log under `dir` (relative
/// to `out`).
fn train_and_eval(
    cfg: &RunConfig,
    run: &LoadedRun,
    out: &Output,
    prefix: &str,
    save_checkpoint: bool,
) -> Result<(Vec<EvalReport>, usize)> {
    let tokenizer = tokenizer_for(&run.train);
    let model = FusionModel::with_toy_text_model(cfg.model.clone(), tokenizer.clone())?;
    let opts = TrainOptions {
        snapshot_dir: Some(out.path(&format!("{prefix}snapshot"))),
        on_epoch: None,
    };
    let mut record = train_with(&model, &run.train, &cfg.train, &run.store, opts)?;
    let corpus = match run.task {
        Task::OpenQa => Some(AnswerCorpus::new(&model, AnswerCorpus::answers_of(&run.train))?),
        _ => None,
    };
    let reports = evaluate(&model, &run.test, corpus.as_ref(), cfg.eval.credit_rule, &cfg.hash())?;
    for r in &reports {
        log::info!("{} = {:.4} over {} samples", r.metric, r.value, r.samples);
    }
    record.eval = reports.clone();
    out.write(&format!("{prefix}run.jsonl"), &record.to_jsonl()?)?;
    if save_checkpoint {
        let ck = out.path(&format!("{prefix}checkpoint"));
        model.save(&ck, &tokenizer)?;
        fs::write(ck.join("run_config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&ck, e))?;
    }
    Ok((reports, record.train_samples))
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut out = Output::new(&a.run.out, "train", argv)?;
    let mut cfg = resolve_run(&a.run, &mut out)?;
    if let Some(f) = a.fewshot_fraction {
        cfg.train.fewshot_fraction = f;
    }
    let run = load_run(&a.run, &mut cfg, &mut out)?;
    log_config(&cfg)?;
    train_and_eval(&cfg, &run, &out, "", true)?;
    out.finish(&cfg.hash(), Some(cfg.train.seed), serde_json::to_value(&cfg)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FewshotLine {
    variant: FusionVariant,
    fraction: f64,
    metric: String,
    value: f64,
    samples: usize,
}

fn cmd_fewshot(a: &FewshotArgs, argv: &[String]) -> Result<()> {
    let mut out = Output::new(&a.run.out, "fewshot", argv)?;
    let base = resolve_run(&a.run, &mut out)?;
    let variants = if a.variants.is_empty() {
        FusionVariant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let mut summary = String::new();
    let mut resolved = Vec::new();
    for &v in &variants {
        for &f in &a.fractions {
            let mut cfg = base.clone();
            cfg.train.variant = v;
            cfg.train.fewshot_fraction = f;
            cfg.train.nested_fewshot = a.nested;
            cfg.train.validate()?;
            let run = load_run(&a.run, &mut cfg, &mut out)?;
            log_config(&cfg)?;
            let prefix = format!("{v}/{f}/");
            let (reports, samples) = train_and_eval(&cfg, &run, &out, &prefix, false)?;
            for r in reports {
                summary.push_str(&serde_json::to_string(&FewshotLine {
                    variant: v,
                    fraction: f,
                    metric: r.metric,
                    value: r.value,
                    samples,
                })?);
                summary.push('\n');
            }
            resolved.push(cfg);
        }
    }
    out.write("summary.jsonl", &summary)?;
    out.finish(&hash_json(&resolved), Some(base.train.seed), serde_json::to_value(&resolved)?)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let out_arg = OutArg {
        out: a
            .out
            .out
            .clone()
            .or_else(|| a.report.as_ref().and_then(|r| r.parent()).map(Path::to_path_buf)),
    };
    let mut out = Output::new(&out_arg, "eval", argv)?;
    let (model, _) = FusionModel::load(&a.checkpoint)?;
    out.input("checkpoint", &a.checkpoint)?;
    let run_cfg_path = a.checkpoint.join("run_config.toml");
    let mut cfg = if run_cfg_path.exists() {
        RunConfig::default().overlay_toml(&read_text(&run_cfg_path)?)?
    } else {
        RunConfig {
            model: model.config().clone(),
            ..RunConfig::default()
        }
    };
    if let Some(r) = a.credit_rule {
        cfg.eval.credit_rule = r;
    }
    let data = DatasetDir::new(&a.data);
    out.input("data", &a.data)?;
    let store = data.features()?;
    let (vocab, tokens) = load_tokens_or_vocab(&a.vocab, &a.tokens, model.variant(), &mut out)?;
    let src = source(&vocab, &tokens);
    let mc = model.config();
    let test = prepare_records(&crate::datasets::load_dataset(&data.test_path(), a.task)?, a.task, &store, src, mc, cfg.train.use_asr)?;
    let corpus = match a.task {
        Task::OpenQa => {
            let train = prepare_records(&crate::datasets::load_dataset(&data.train_path(), a.task)?, a.task, &store, src, mc, cfg.train.use_asr)?;
            Some(AnswerCorpus::new(&model, AnswerCorpus::answers_of(&train))?)
        }
        _ => None,
    };
    let reports = evaluate(&model, &test, corpus.as_ref(), cfg.eval.credit_rule, &cfg.hash())?;
    let mut body = String::new();
    for r in &reports {
        log::info!("{} = {:.4} over {} samples", r.metric, r.value, r.samples);
        println!("{}\t{}", r.metric, r.value);
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    let report_path = a.report.clone().unwrap_or_else(|| out.path("report.jsonl"));
    fs::write(&report_path, &body).map_err(|e| Error::io(&report_path, e))?;
    out.finish(&cfg.hash(), Some(cfg.train.seed), serde_json::to_value(&cfg)?)?;
    Ok(())
}

fn cmd_overlap(a: &OverlapArgs, argv: &[String]) -> Result<()> {
    let tokens = load_tokens(&a.tokens)?;
    let data = DatasetDir::new(&a.data);
    let path = match a.split {
        Split::Train => data.train_path(),
        Split::Test => data.test_path(),
    };
    let Records::Qa(records) = crate::datasets::load_dataset(&path, data.meta()?.task)? else {
        return Err(Error::Data("overlap needs question-answering data".into()));
    };
    let pairs = records
        .iter()
        .map(|r| {
            let words = tokens
                .get(&r.video_id)
                .ok_or_else(|| Error::MissingFeature(r.video_id.clone()))?;
            Ok((order_answers(&r.answers).remove(0), words.iter().flatten().cloned().collect()))
        })
        .collect::<Result<Vec<(String, Vec<String>)>>>()?;
    let value = overlap_statistic(&pairs);
    println!("overlap\t{value}");
    if a.out.out.is_some() || std::env::var_os(OUT_ENV).is_some() {
        let mut out = Output::new(&a.out, "overlap", argv)?;
        out.input("tokens", &a.tokens)?;
        out.input("data", &a.data)?;
        let report = EvalReport::new("overlap", value, pairs.len(), "")?;
        out.write("report.jsonl", &format!("{}\n", serde_json::to_string(&report)?))?;
        out.finish("", None, serde_json::Value::Null)?;
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numeric { .. } | Error::NonFinite(_) | Error::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = cli.log.parse().unwrap_or(log::LevelFilter::Info);
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, &argv),
        Command::BuildVocab(a) => cmd_build_vocab(a, &argv),
        Command::Tokenize(a) => cmd_tokenize(a, &argv),
        Command::Train(a) => cmd_train(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Fewshot(a) => cmd_fewshot(a, &argv),
        Command::Overlap(a) => cmd_overlap(a, &argv),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
