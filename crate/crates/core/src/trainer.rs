//! Mini-batch training with Adam, validation-driven early stopping,
//! best-checkpoint saving and a JSONL run log.
//!
//! Each pair in a batch gets its own graph; per-pair gradients are computed
//! (in parallel when enabled) and summed in batch order, so results do not
//! depend on the thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::HistoryResponsePair;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{LossBreakdown, RedModel};
use crate::par::{map_ordered, Execution};
use crate::rng::{stream_rng, Stream};
use crate::substrate::{adam_step, save_checkpoint, AdamConfig, Gradients, Graph, ParameterSet};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub exec: Execution,
    pub checkpoint: Option<PathBuf>,
    /// Stored alongside the parameters in every checkpoint written.
    pub checkpoint_meta: serde_json::Value,
    pub log: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            grad_clip: 5.0,
            exec: Execution::default(),
            checkpoint: None,
            checkpoint_meta: serde_json::Value::Null,
            log: None,
            verbose: false,
        }
    }
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        Self {
            lr: cfg.learning_rate(),
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            grad_clip: t.grad_clip,
            exec: Execution::from_flag(t.parallel),
            checkpoint: t.checkpoint.clone(),
            checkpoint_meta: serde_json::Value::Null,
            log: t.log.clone(),
            verbose: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Mean over training batches, measured before each update.
    pub train: LossBreakdown,
    pub valid_ppl: f64,
    pub best_valid_ppl: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation PPL.
    pub best_params: ParameterSet,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

struct PairResult {
    gen: f64,
    rank: f64,
    total: f64,
    tokens: usize,
    instances: usize,
    grads: Gradients,
}

fn pair_gradients(
    model: &RedModel,
    params: &ParameterSet,
    pair: &HistoryResponsePair,
) -> Result<PairResult> {
    let mut g = Graph::new(params);
    let f = model.forward(&mut g, pair)?;
    let grads = g.backward(f.total);
    Ok(PairResult {
        gen: g.scalar(f.gen),
        rank: g.scalar(f.rank),
        total: g.scalar(f.total),
        tokens: f.tokens,
        instances: f.instances,
        grads,
    })
}

fn reduce(
    results: Vec<Result<PairResult>>,
    params: &ParameterSet,
) -> Result<(LossBreakdown, Gradients)> {
    let n = results.len();
    let mut sum = Gradients::zeros_like(params);
    let mut b = LossBreakdown::default();
    for r in results {
        let r = r?;
        sum.merge(&r.grads);
        b.gen += r.gen;
        b.rank += r.rank;
        b.total += r.total;
        b.tokens += r.tokens;
        b.instances += r.instances;
    }
    let inv = 1.0 / n as f64;
    sum.scale(inv);
    b.gen *= inv;
    b.rank *= inv;
    b.total *= inv;
    Ok((b, sum))
}

/// Batch-mean losses and gradients of `total` for `batch`.
pub fn batch_gradients(
    model: &RedModel,
    params: &ParameterSet,
    batch: &[&HistoryResponsePair],
    exec: Execution,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no pairs"));
    }
    let results = map_ordered(batch, exec, |_, p| pair_gradients(model, params, p));
    reduce(results, params)
}

/// Batch-mean `L_gen`, `L_rank` and `L = L_gen + alpha * L_rank`, forward only.
pub fn joint_loss(
    model: &RedModel,
    params: &ParameterSet,
    batch: &[HistoryResponsePair],
    exec: Execution,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no pairs"));
    }
    let parts = map_ordered(
        batch,
        exec,
        |_, p| -> Result<(f64, f64, f64, usize, usize)> {
            let mut g = Graph::new(params);
            let f = model.forward(&mut g, p)?;
            Ok((
                g.scalar(f.gen),
                g.scalar(f.rank),
                g.scalar(f.total),
                f.tokens,
                f.instances,
            ))
        },
    );
    let mut b = LossBreakdown::default();
    for p in parts {
        let (gen, rank, total, tokens, instances) = p?;
        b.gen += gen;
        b.rank += rank;
        b.total += total;
        b.tokens += tokens;
        b.instances += instances;
    }
    let n = batch.len() as f64;
    b.gen /= n;
    b.rank /= n;
    b.total /= n;
    Ok(b)
}

/// Trains with validation PPL on `valid` as the early-stopping metric.
pub fn train(
    model: &RedModel,
    params: &mut ParameterSet,
    train_pairs: &[HistoryResponsePair],
    valid_pairs: &[HistoryResponsePair],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if valid_pairs.is_empty() {
        return Err(Error::Empty("validation split has no pairs"));
    }
    train_with(model, params, train_pairs, opts, |m, p, _| {
        eval::perplexity(m, p, valid_pairs, opts.exec)
    })
}

/// Like [`train`] with a caller-supplied validation metric (lower is better).
pub fn train_with<V>(
    model: &RedModel,
    params: &mut ParameterSet,
    train_pairs: &[HistoryResponsePair],
    opts: &TrainOptions,
    mut validate: V,
) -> Result<TrainOutcome>
where
    V: FnMut(&RedModel, &ParameterSet, usize) -> Result<f64>,
{
    opts.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Empty("training split has no pairs"));
    }
    let mut log_file = match &opts.log {
        Some(path) => Some(BufWriter::new(
            File::create(path).map_err(|e| Error::io(path, e))?,
        )),
        None => None,
    };
    let adam = AdamConfig::with_lr(opts.lr);
    let mut shuffle_rng = stream_rng(opts.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    let mut outcome = TrainOutcome {
        best_params: params.clone(),
        best_epoch: 0,
        best_valid_ppl: f64::INFINITY,
        epochs_run: 0,
        stopped_early: false,
        log: Vec::new(),
    };
    if opts.max_epochs == 0 {
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(path, params, &opts.checkpoint_meta)?;
        }
        return Ok(outcome);
    }

    let mut since_best = 0;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossBreakdown::default();
        let mut batches = 0;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<&HistoryResponsePair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (b, mut grads) = batch_gradients(model, params, &batch, opts.exec)?;
            if !b.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            grads.clip_global_norm(opts.grad_clip);
            adam_step(params, &grads, &adam)?;
            acc.gen += b.gen;
            acc.rank += b.rank;
            acc.total += b.total;
            acc.tokens += b.tokens;
            acc.instances += b.instances;
            batches += 1;
        }
        acc.gen /= batches as f64;
        acc.rank /= batches as f64;
        acc.total /= batches as f64;

        let ppl = validate(model, params, epoch)?;
        let improved = ppl < outcome.best_valid_ppl;
        if improved {
            outcome.best_valid_ppl = ppl;
            outcome.best_epoch = epoch;
            outcome.best_params = params.clone();
            since_best = 0;
            if let Some(path) = &opts.checkpoint {
                save_checkpoint(path, params, &opts.checkpoint_meta)?;
            }
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            batches,
            train: acc,
            valid_ppl: ppl,
            best_valid_ppl: outcome.best_valid_ppl,
            improved,
        };
        if let Some(w) = log_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(opts.log.clone().unwrap(), e))?;
        }
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: gen {:.4} rank {:.4} total {:.4} valid ppl {:.4}{}",
                acc.gen,
                acc.rank,
                acc.total,
                ppl,
                if improved { " *" } else { "" }
            );
        }
        outcome.log.push(record);
        outcome.epochs_run = epoch;
        if since_best >= opts.patience {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}
