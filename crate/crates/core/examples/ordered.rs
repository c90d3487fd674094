//! Trains on the synthetic ordered corpus and reports ranking accuracy and
//! validation PPL after every epoch.
//!
//! cargo run --release --example ordered -- [encoder] [mode] [alpha] [seed] [epochs]

use red_core::config::{ModelConfig, RankMode};
use red_core::corpus::synthetic::{ordered_dialogues, ordered_vocab};
use red_core::corpus::{prepare_pairs, CorpusConfig, HistoryResponsePair};
use red_core::eval;
use red_core::model::RedModel;
use red_core::par::Execution;
use red_core::trainer::{train_with, TrainOptions};

fn last_pairs(pairs: Vec<HistoryResponsePair>) -> Vec<HistoryResponsePair> {
    if std::env::var_os("ALL_PAIRS").is_some() {
        return pairs;
    }
    pairs.into_iter().filter(|p| p.history.len() == 7).collect()
}

fn main() -> red_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let mut cfg = ModelConfig::default();
    cfg.encoder.kind = serde_json::from_value(serde_json::json!(arg(0, "hier_lstm")))?;
    cfg.rank.mode = serde_json::from_value::<RankMode>(serde_json::json!(arg(1, "global")))?;
    cfg.rank.alpha = arg(2, "1.0").parse().unwrap();
    let seed: u64 = arg(3, "0").parse().unwrap();
    let epochs: usize = arg(4, "30").parse().unwrap();
    for (e, d) in [
        (&mut cfg.encoder.embed_dim, 16),
        (&mut cfg.encoder.hidden_dim, 32),
    ] {
        *e = d;
    }
    cfg.encoder.num_layers = 1;
    cfg.decoder.embed_dim = 16;
    cfg.decoder.hidden_dim = 32;
    cfg.decoder.num_layers = 1;
    cfg.rank.query_hidden = 16;
    cfg.rank.scorer_hidden = 32;

    let vocab = ordered_vocab();
    let corpus = CorpusConfig::default();
    let train = last_pairs(prepare_pairs(
        &ordered_dialogues(500, 8, 3, 5, 100 + seed),
        &vocab,
        &corpus,
    )?);
    let held = last_pairs(prepare_pairs(
        &ordered_dialogues(100, 8, 3, 5, 10_000 + seed),
        &vocab,
        &corpus,
    )?);
    let (model, mut params) = RedModel::init(&cfg, vocab.len(), seed)?;
    let opts = TrainOptions {
        max_epochs: epochs,
        patience: epochs,
        seed,
        lr: 0.005,
        ..TrainOptions::default()
    };
    let start = std::time::Instant::now();
    train_with(&model, &mut params, &train, &opts, |m, p, epoch| {
        let ppl = eval::perplexity(m, p, &held, Execution::Parallel)?;
        let probe = if m.aggregator.is_some() {
            eval::rank_probe(m, p, &held, Execution::Parallel)?.accuracy
        } else {
            f64::NAN
        };
        eprintln!(
            "epoch {epoch:2} ppl {ppl:.4} rank_acc {probe:.4} t={:.1}s",
            start.elapsed().as_secs_f64()
        );
        Ok(ppl)
    })?;
    Ok(())
}
