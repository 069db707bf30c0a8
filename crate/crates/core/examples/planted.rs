//! Train one variant on the planted-signal dataset and print per-epoch loss
//! and test accuracy.
//!
//! cargo run --release --example planted -- TEXT_TEXT 30 0.05 0

use std::time::Instant;

use textvid::datasets::{generate_synthetic, SyntheticSpec, Task};
use textvid::eval::{eval_open_ended, AnswerCorpus, CreditRule};
use textvid::fusion::{FusionConfig, FusionModel, FusionVariant};
use textvid::token_retrieval::{Vocabulary, WordlistTagger};
use textvid::train::{prepare_records, tokenizer_for, train_with, EpochRecord, TokenSource, TrainConfig, TrainOptions};

fn main() -> textvid::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let variant: FusionVariant = args.get(1).map_or("TEXT_TEXT", String::as_str).parse()?;
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let sigma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let start = Instant::now();
    let ds = generate_synthetic(&SyntheticSpec { noise_sigma: sigma, ..SyntheticSpec::default() })?;
    let vocab = Vocabulary::build(&ds.corpus, &WordlistTagger::bundled(), &ds.encoder)?;
    let cfg = TrainConfig { variant, epochs, seed, ..TrainConfig::desk() };
    let mut mc = FusionConfig::default();
    cfg.apply_to(&mut mc);
    let tokens = || Some(TokenSource::Retrieve(&vocab));
    let train_data = prepare_records(&ds.train, Task::OpenQa, &ds.encoder, tokens(), &mc, false)?;
    let test_data = prepare_records(&ds.test, Task::OpenQa, &ds.encoder, tokens(), &mc, false)?;
    let model = FusionModel::with_toy_text_model(mc, tokenizer_for(&train_data))?;

    let hook = |e: &EpochRecord, m: &FusionModel| -> textvid::Result<()> {
        let corpus = AnswerCorpus::new(m, AnswerCorpus::answers_of(&train_data))?;
        let acc = eval_open_ended(m, &test_data, &corpus, CreditRule::Auto)?;
        println!("epoch {:2} loss {:.4} test accuracy {:.3}", e.epoch, e.mean_loss, acc.accuracy);
        Ok(())
    };
    let opts = TrainOptions { on_epoch: Some(Box::new(hook)), ..Default::default() };
    train_with(&model, &train_data, &cfg, &ds.encoder, opts)?;
    let corpus = AnswerCorpus::new(&model, AnswerCorpus::answers_of(&train_data))?;
    let acc = eval_open_ended(&model, &test_data, &corpus, CreditRule::Auto)?;
    println!("{variant}: test accuracy {:.4} in {:.1}s", acc.accuracy, start.elapsed().as_secs_f64());
    Ok(())
}
