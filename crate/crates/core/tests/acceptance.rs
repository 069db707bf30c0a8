//! Acceptance criteria 1 to 8. Each test prints one `[PASS]`/`[FAIL]` line
//! straight to stderr, so it shows without `--nocapture`.
//! A process-wide lock runs them one at a time so runtimes are comparable.
//!
//! cargo test --release -p textvid --test acceptance -- --nocapture

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textvid::datasets::{generate_synthetic, SyntheticDataset, SyntheticSpec, Task};
use textvid::embeddings::{EmbeddingMatrix, Similarity};
use textvid::encoders::{
    text_encoder_fingerprint, video_encoder_fingerprint, FrozenVideoEncoder, ToyTextModel, VideoFeatures,
};
use textvid::eval::{
    eval_open_ended, multiple_choice_accuracy, open_ended_from_scores, retrieval_from_scores, AnswerCorpus,
    CreditRule,
};
use textvid::fusion::{FusionConfig, FusionModel, FusionVariant};
use textvid::objectives::{loss_gradient_check, nce_loss, symmetric_loss, Objective, ScoreMatrix};
use textvid::token_retrieval::{retrieve_tokens, Vocabulary, VocabularySource, WordlistTagger};
use textvid::train::{batch_loss, prepare_records, tokenizer_for, train, PreparedData, TokenSource, TrainConfig};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Bypasses the test harness's output capture.
fn report(line: std::fmt::Arguments) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// Print the verdict line, then fail the test if any check failed.
fn verdict(n: usize, title: &str, seconds: f64, limit: f64, checks: &[(String, bool)]) {
    let timed = seconds < limit;
    let ok = timed && checks.iter().all(|(_, ok)| *ok);
    let detail: Vec<String> = checks
        .iter()
        .map(|(d, ok)| if *ok { d.clone() } else { format!("{d} [failed]") })
        .collect();
    report(format_args!(
        "[{}] AC{n} {title}: {}; {seconds:.1}s (limit {limit}s){}",
        if ok { "PASS" } else { "FAIL" },
        detail.join("; "),
        if timed { "" } else { " [too slow]" },
    ));
    assert!(ok, "AC{n} failed");
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> ScoreMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    ScoreMatrix::new(rows, cols, data).unwrap()
}

fn hand_nce(s: &ScoreMatrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let z: f64 = s.row(i).iter().map(|v| v.exp()).sum();
        total += -(s.get(i, l).exp() / z).ln();
    }
    total / labels.len() as f64
}

#[test]
fn ac1_loss_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut symmetric_exact = true;
    for _ in 0..20 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let s = random_matrix(&mut rng, r, c, 4.0);
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        worst = worst.max((nce_loss(&s, &labels).unwrap() - hand_nce(&s, &labels)).abs());

        let n = rng.random_range(1..=8);
        let sq = random_matrix(&mut rng, n, n, 4.0);
        let diag: Vec<usize> = (0..n).collect();
        let want = 0.5 * (nce_loss(&sq, &diag).unwrap() + nce_loss(&sq.transpose(), &diag).unwrap());
        symmetric_exact &= symmetric_loss(&sq).unwrap().to_bits() == want.to_bits();
        worst = worst.max((symmetric_loss(&sq).unwrap() - 0.5 * (hand_nce(&sq, &diag) + hand_nce(&sq.transpose(), &diag))).abs());
    }
    let b1 = symmetric_loss(&ScoreMatrix::new(1, 1, vec![3.7]).unwrap()).unwrap();
    verdict(
        1,
        "loss oracles",
        start.elapsed().as_secs_f64(),
        1.0,
        &[
            (format!("max |nce - hand| = {worst:.1e} over 20 matrices"), worst <= 1e-6),
            ("symmetric = 0.5(row + column) bitwise".into(), symmetric_exact),
            (format!("B=1 symmetric loss = {b1}"), b1 == 0.0),
        ],
    );
}

fn small_spec(samples: usize, sigma: f64) -> SyntheticSpec {
    SyntheticSpec {
        train_samples: samples,
        test_samples: samples / 2,
        vocab_size: 40,
        answers: 10,
        noise_sigma: sigma,
        ..SyntheticSpec::default()
    }
}

fn prepared(ds: &SyntheticDataset, vocab: &Vocabulary, mc: &FusionConfig) -> (PreparedData, PreparedData) {
    let src = || Some(TokenSource::Retrieve(vocab));
    (
        prepare_records(&ds.train, Task::OpenQa, &ds.encoder, src(), mc, false).unwrap(),
        prepare_records(&ds.test, Task::OpenQa, &ds.encoder, src(), mc, false).unwrap(),
    )
}

fn flat(v: &candle_core::Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set_flat(v: &candle_core::Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, v.as_tensor().shape(), v.as_tensor().device()).unwrap();
    v.set(&t).unwrap();
}

#[test]
fn ac2_gradient_checks() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=16);
        let s = random_matrix(&mut rng, n, n, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        worst_loss = worst_loss.max(loss_gradient_check(&Objective::Nce(labels), &s, 1e-5).unwrap());
        worst_loss = worst_loss.max(loss_gradient_check(&Objective::Symmetric, &s, 1e-5).unwrap());
    }

    // One TEXT_TEXT training step on the toy model.
    let ds = generate_synthetic(&small_spec(16, 0.05)).unwrap();
    let vocab = Vocabulary::build(&ds.corpus, &WordlistTagger::bundled(), &ds.encoder).unwrap();
    let cfg = TrainConfig { variant: FusionVariant::TextText, ..TrainConfig::desk() };
    let mut mc = FusionConfig::default();
    cfg.apply_to(&mut mc);
    let (data, _) = prepared(&ds, &vocab, &mc);
    let model = FusionModel::with_toy_text_model(mc, tokenizer_for(&data)).unwrap();
    let batch: Vec<_> = data.samples.iter().take(8).collect();
    let loss = || batch_loss(&model, &batch, Task::OpenQa).unwrap().to_scalar::<f64>().unwrap();
    let grads = batch_loss(&model, &batch, Task::OpenQa).unwrap().backward().unwrap();

    let params: Vec<_> = model
        .named_parameters()
        .into_iter()
        .filter(|(name, _)| !name.ends_with("table"))
        .collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..6 {
        let (_, var) = &params[rng.random_range(0..params.len())];
        let g = grads.get(var).expect("gradient for every trainable parameter");
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = flat(var);
        for _ in 0..6 {
            let i = rng.random_range(0..base.len());
            let mut p = base.clone();
            p[i] += h;
            set_flat(var, p.clone());
            let lp = loss();
            p[i] -= 2.0 * h;
            set_flat(var, p);
            let lm = loss();
            set_flat(var, base.clone());
            analytic.push(g[i]);
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale;
    verdict(
        2,
        "gradient checks",
        start.elapsed().as_secs_f64(),
        60.0,
        &[
            (format!("loss gradients rel. deviation {worst_loss:.1e}"), worst_loss <= 1e-6),
            (
                format!("TEXT_TEXT step rel. deviation {dev:.1e} on 36 entries (scale {scale:.2e})"),
                scale > 0.0 && dev <= 1e-3,
            ),
        ],
    );
}

fn brute_force(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn ac3_retrieval_engine_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut queries = 0;
    for (words, dim) in [(10_000, 8), (3_000, 16), (257, 4)] {
        // small integer entries make score ties common and exact
        let data: Vec<f64> = (0..words * dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        let names: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        let m = EmbeddingMatrix::new(words, dim, data.clone(), None).unwrap();
        let vocab = Vocabulary::from_parts(names, m, VocabularySource::ExternalList).unwrap();
        let rows: Vec<f64> = (0..100 * dim).map(|_| rng.random_range(-3i32..=3) as f64).collect();
        let features = VideoFeatures::new(dim, rows.clone()).unwrap();
        let k = rng.random_range(1..=50);
        let got = retrieve_tokens(&features, &vocab, k, Similarity::Dot).unwrap();
        for (q, seg) in got.iter().enumerate() {
            let query = &rows[q * dim..(q + 1) * dim];
            let scores: Vec<f64> = (0..words)
                .map(|w| (0..dim).map(|d| query[d] * data[w * dim + d]).sum())
                .collect();
            let have: Vec<usize> = seg.entries.iter().map(|e| e.index).collect();
            mismatches += usize::from(have != brute_force(&scores, k));
            queries += 1;
        }
    }

    let mut flipped = 0;
    for _ in 0..1_000 {
        let (words, dim) = (rng.random_range(1..60), rng.random_range(1..12));
        let m = EmbeddingMatrix::new(words, dim, (0..words * dim).map(|_| rng.random_range(-1.0..1.0)).collect(), None)
            .unwrap();
        let vocab =
            Vocabulary::from_parts((0..words).map(|i| format!("w{i}")).collect(), m, VocabularySource::ExternalList)
                .unwrap();
        let f = VideoFeatures::new(dim, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let a = retrieve_tokens(&f, &vocab, 1, Similarity::Dot).unwrap();
        let b = retrieve_tokens(&f.scaled(c).unwrap(), &vocab, 1, Similarity::Dot).unwrap();
        flipped += usize::from(a[0].entries[0].index != b[0].entries[0].index);
    }
    verdict(
        3,
        "retrieval engine oracle",
        start.elapsed().as_secs_f64(),
        30.0,
        &[
            (format!("{mismatches}/{queries} queries differ from brute force"), mismatches == 0),
            (format!("{flipped}/1000 argmax changes under rescaling"), flipped == 0),
        ],
    );
}

struct Outcome {
    accuracy: f64,
    embedding_dim: usize,
    frozen_unchanged: bool,
    seconds: f64,
}

/// The criterion-4 dataset at the default sigma, shared by every run.
fn planted_dataset() -> &'static (SyntheticDataset, Vocabulary) {
    static DS: OnceLock<(SyntheticDataset, Vocabulary)> = OnceLock::new();
    DS.get_or_init(|| {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let vocab = Vocabulary::build(&ds.corpus, &WordlistTagger::bundled(), &ds.encoder).unwrap();
        (ds, vocab)
    })
}

/// Train `variant` with the desk profile on the planted dataset. Runs are
/// cached so criteria sharing a configuration train it once; the second
/// element says whether this call did the training.
fn planted_run(variant: FusionVariant, seed: u64) -> (&'static Outcome, bool) {
    static RUNS: OnceLock<Mutex<HashMap<(FusionVariant, u64), &'static Outcome>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(o) = runs.lock().unwrap().get(&(variant, seed)) {
        return (o, false);
    }
    let start = Instant::now();
    let (ds, vocab) = planted_dataset();
    let words: Vec<String> = vocab.words().to_vec();
    let video_before = video_encoder_fingerprint(&ds.encoder).unwrap();
    let text_before = text_encoder_fingerprint(&ds.encoder, &words).unwrap();

    let cfg = TrainConfig { variant, seed, ..TrainConfig::desk() };
    let mut mc = FusionConfig::default();
    cfg.apply_to(&mut mc);
    let (train_data, test_data) = prepared(ds, vocab, &mc);
    let model = FusionModel::with_toy_text_model(mc, tokenizer_for(&train_data)).unwrap();
    let rec = train(&model, &train_data, &cfg, &ds.encoder).unwrap();
    let corpus = AnswerCorpus::new(&model, AnswerCorpus::answers_of(&train_data)).unwrap();
    let accuracy = eval_open_ended(&model, &test_data, &corpus, CreditRule::Auto).unwrap().accuracy;
    let frozen_unchanged = rec.frozen_encoder_hash == video_before
        && video_encoder_fingerprint(&ds.encoder).unwrap() == video_before
        && text_encoder_fingerprint(&ds.encoder, &words).unwrap() == text_before;
    let outcome: &'static Outcome = Box::leak(Box::new(Outcome {
        accuracy,
        embedding_dim: model.embedding_dim(),
        frozen_unchanged,
        seconds: start.elapsed().as_secs_f64(),
    }));
    report(format_args!("  {variant} seed {seed}: accuracy {accuracy:.3} in {:.1}s", outcome.seconds));
    runs.lock().unwrap().insert((variant, seed), outcome);
    (outcome, true)
}

/// Wall time of a criterion, counting cached runs at their original cost.
struct Clock {
    start: Instant,
    computed: f64,
    used: f64,
}

impl Clock {
    fn new() -> Self {
        Self { start: Instant::now(), computed: 0.0, used: 0.0 }
    }

    fn run(&mut self, variant: FusionVariant, seed: u64) -> &'static Outcome {
        let (o, fresh) = planted_run(variant, seed);
        if fresh {
            self.computed += o.seconds;
        }
        self.used += o.seconds;
        o
    }

    fn seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64() - self.computed + self.used
    }
}

#[test]
fn ac4_planted_signal_end_to_end() {
    let _g = serial();
    let mut clock = Clock::new();
    let spec = SyntheticSpec::default();
    let shape_ok = (spec.train_samples, spec.test_samples, spec.vocab_size, spec.answers, spec.dim, spec.noise_sigma)
        == (1000, 200, 200, 100, 64, 0.05);
    let epochs_ok = TrainConfig::desk().epochs <= 30;
    let o = clock.run(FusionVariant::TextText, 0);

    let clean = generate_synthetic(&SyntheticSpec { noise_sigma: 0.0, ..SyntheticSpec::default() }).unwrap();
    let vocab = Vocabulary::build(&clean.corpus, &WordlistTagger::bundled(), &clean.encoder).unwrap();
    let (mut hits, mut retrieved) = (0usize, 0usize);
    for id in clean.encoder.video_ids() {
        let plan = clean.planted(&id).unwrap();
        let f = clean.encoder.encode_video(&id).unwrap();
        let k = plan.iter().map(Vec::len).max().unwrap();
        for (seg, words) in retrieve_tokens(&f, &vocab, k, Similarity::Dot).unwrap().iter().zip(plan) {
            for e in seg.entries.iter().take(words.len()) {
                retrieved += 1;
                hits += usize::from(words.contains(&e.word));
            }
        }
    }
    let precision = hits as f64 / retrieved as f64;
    verdict(
        4,
        "planted-signal end-to-end",
        clock.seconds(),
        300.0,
        &[
            ("dataset 1000/200, vocab 200, 100 answers, D=64, sigma 0.05".into(), shape_ok),
            (format!("TEXT_TEXT accuracy {:.1}% after {} epochs", 100.0 * o.accuracy, TrainConfig::desk().epochs), o.accuracy >= 0.95 && epochs_ok),
            (format!("sigma=0 planted-word precision {precision} over {retrieved} words"), precision == 1.0),
        ],
    );
}

#[test]
fn ac5_design_space_parity() {
    let _g = serial();
    let mut clock = Clock::new();
    let outcomes: Vec<(FusionVariant, &Outcome)> =
        FusionVariant::ALL.iter().map(|&v| (v, clock.run(v, 0))).collect();
    let mut checks: Vec<(String, bool)> = outcomes
        .iter()
        .map(|(v, o)| (format!("{v} {:.1}%", 100.0 * o.accuracy), o.accuracy >= 0.60))
        .collect();
    let dims: Vec<usize> = outcomes.iter().map(|(_, o)| o.embedding_dim).collect();
    checks.push((format!("embedding dims {dims:?}"), dims.iter().all(|&d| d == dims[0])));
    checks.push((
        "frozen encoder hashes unchanged".into(),
        outcomes.iter().all(|(_, o)| o.frozen_unchanged),
    ));
    verdict(5, "design-space harness parity", clock.seconds(), 900.0, &checks);
}

#[test]
fn ac6_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let corpus: Vec<String> = vec!["oil".into(), "salt".into()];
    let mut table = Vec::new();
    let mut table_ok = true;
    for (m, want) in [(0, 0.0), (1, 0.5), (2, 1.0), (5, 1.0)] {
        let ann: Vec<String> = (0..5).map(|i| if i < m { "oil".into() } else { format!("x{i}") }).collect();
        let got = open_ended_from_scores(&[vec![1.0, 0.0]], &corpus, &[ann], CreditRule::Auto).unwrap().accuracy;
        table.push(format!("{m}->{got}"));
        table_ok &= got == want;
    }
    // query 0 ranks its item first, query 1 ranks it seventh
    let mut scores = vec![vec![0.0; 10], vec![0.0; 10]];
    scores[0][0] = 1.0;
    for (j, s) in scores[1].iter_mut().enumerate() {
        *s = 1.0 - j as f64 * 0.1;
    }
    let ret = retrieval_from_scores(&scores, &[Some(0), Some(6)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..10_000).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let mc = multiple_choice_accuracy(&rows).unwrap();
    let sigma = (0.25f64 * 0.75 / 10_000.0).sqrt();
    verdict(
        6,
        "metric oracles",
        start.elapsed().as_secs_f64(),
        60.0,
        &[
            (format!("credit table {}", table.join(" ")), table_ok),
            (format!("AveR {:.2}", ret.aver), (ret.aver - 66.67).abs() < 0.005),
            (format!("random multiple choice {:.4} ({:.2} sigma)", mc, (mc - 0.25) / sigma), (mc - 0.25).abs() <= 3.0 * sigma),
        ],
    );
}

fn cli(args: &[&str]) -> i32 {
    textvid::cli::run(["textvid", "--log", "warn"].into_iter().chain(args.iter().copied()))
}

/// synth, build-vocab, tokenize, train and eval under `root`; returns the
/// bytes of every manifest and the eval report.
fn pipeline(root: &Path) -> (Vec<Vec<u8>>, String) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "train_samples = 200\ntest_samples = 50\nvocab_size = 80\nanswers = 20\n").unwrap();
    let steps: [Vec<String>; 5] = [
        vec!["synth".into(), "--spec".into(), p("spec.toml"), "--out".into(), p("data")],
        vec!["build-vocab".into(), "--data".into(), p("data"), "--out".into(), p("vocab")],
        vec!["tokenize".into(), "--data".into(), p("data"), "--vocab".into(), p("vocab"), "--k".into(), "3".into(), "--out".into(), p("tok")],
        ["train", "--profile", "desk", "--variant", "TEXT_MULTI", "--epochs", "4", "--data", &p("data"), "--tokens", &p("tok/tokens.jsonl"), "--out", &p("train")]
            .map(String::from)
            .to_vec(),
        ["eval", "--checkpoint", &p("train/checkpoint"), "--data", &p("data"), "--task", "openqa", "--tokens", &p("tok/tokens.jsonl"), "--out", &p("eval")]
            .map(String::from)
            .to_vec(),
    ];
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        assert_eq!(cli(&args), 0, "{args:?}");
    }
    let manifests = ["data", "vocab", "tok", "train", "eval"]
        .iter()
        .map(|d| std::fs::read(root.join(d).join("manifest.json")).unwrap())
        .collect();
    (manifests, std::fs::read_to_string(root.join("eval/report.jsonl")).unwrap())
}

#[test]
fn ac7_reproducibility() {
    let _g = serial();
    let mut clock = Clock::new();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    std::fs::create_dir(&root).unwrap();
    let (m1, r1) = pipeline(&root);
    std::fs::remove_dir_all(&root).unwrap();
    std::fs::create_dir(&root).unwrap();
    let (m2, r2) = pipeline(&root);

    let accs: Vec<f64> = (0..3).map(|s| clock.run(FusionVariant::TextText, s).accuracy).collect();
    // accuracies are multiples of 1/test_samples; compare whole samples so
    // the bound is not decided by rounding in the subtraction
    let n = SyntheticSpec::default().test_samples as f64;
    let correct: Vec<i64> = accs.iter().map(|a| (a * n).round() as i64).collect();
    let spread_samples = correct.iter().max().unwrap() - correct.iter().min().unwrap();
    let spread = 100.0 * spread_samples as f64 / n;
    verdict(
        7,
        "reproducibility",
        clock.seconds(),
        900.0,
        &[
            (format!("{} manifests byte-identical across two pipeline runs", m1.len()), m1 == m2),
            ("identical final metrics".into(), r1 == r2 && !r1.is_empty()),
            (
                format!("TEXT_TEXT seeds 0-2 accuracy {:?}, spread {spread:.1} points", accs.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>()),
                100 * spread_samples <= 2 * n as i64,
            ),
        ],
    );
}

#[test]
fn ac8_initialization_trick() {
    let _g = serial();
    let start = Instant::now();
    let ds = generate_synthetic(&small_spec(8, 0.05)).unwrap();
    let mut mc = FusionConfig { variant: FusionVariant::ContiText, ..FusionConfig::default() };
    mc.text.seed = 5;
    let words = ds.corpus.iter().map(String::as_str);
    let g = ToyTextModel::new(mc.text.clone(), textvid::encoders::WordTokenizer::from_corpus(words)).unwrap();
    // move the text model's norm away from its default so equality is informative
    let ln = textvid::encoders::TextModel::post_embedding_norm(&g);
    ln.gamma.set(&(ln.gamma.as_tensor() * 1.3).unwrap()).unwrap();
    ln.beta.set(&(ln.beta.as_tensor() - 0.2).unwrap()).unwrap();
    let bits = |v: &candle_core::Var| flat(v).iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let (want_g, want_b) = (bits(&ln.gamma), bits(&ln.beta));

    let on = FusionModel::new(mc.clone(), Box::new(g.fork_toy().unwrap())).unwrap();
    let fin = on.projector().unwrap().final_norm();
    let copied = bits(&fin.gamma) == want_g && bits(&fin.beta) == want_b;

    let off = FusionModel::new(FusionConfig { init_projector_norm: false, ..mc }, Box::new(g.fork_toy().unwrap())).unwrap();
    let fin = off.projector().unwrap().final_norm();
    let ablated = bits(&fin.gamma) != want_g && flat(&fin.gamma).iter().all(|&v| v == 1.0);
    let only_b = FusionVariant::ALL.iter().filter(|v| v.has_projector()).count() == 1;
    verdict(
        8,
        "initialization trick",
        start.elapsed().as_secs_f64(),
        60.0,
        &[
            ("CONTI_TEXT projector final norm equals text post-embedding norm bitwise".into(), copied),
            ("init_projector_norm = false leaves the default init".into(), ablated),
            ("only CONTI_TEXT has a projector".into(), only_b),
        ],
    );
}
