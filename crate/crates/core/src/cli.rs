//! `red` command-line front end. Primary output goes to stdout as JSON;
//! progress and diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::corpus::{
    build_vocab, detokenize, load_corpus, prepare_pairs, tokenize, write_pair_cache, CorpusConfig,
    HistoryResponsePair, PerturbKind, RawDialogue, Utterance, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{self, Buckets};
use crate::model::RedModel;
use crate::par::Execution;
use crate::substrate::{load_checkpoint, restore_into, ParameterSet};
use crate::trainer::{self, TrainOptions};

#[derive(Debug, Parser)]
#[command(
    name = "red",
    version,
    about = "Ranking-enhanced multi-turn dialogue generation"
)]
struct Cli {
    /// Run per-pair work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the vocabulary and binary pair caches for every configured split.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from an existing checkpoint with the same architecture.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Perplexity, distinct-1/2 and optional breakdowns for a dataset.
    Eval {
        #[command(flatten)]
        src: DataSource,
        /// Closed bucket upper bounds for the history-length breakdown, e.g. `10,15`.
        #[arg(long, num_args = 0..=1, default_missing_value = "10,15")]
        buckets: Option<String>,
        /// Checkpoint whose bucket PPLs serve as the delta reference.
        #[arg(long, requires = "buckets")]
        reference: Option<PathBuf>,
        /// Include the perturbation table.
        #[arg(long)]
        perturb: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        perturb_seeds: Vec<u64>,
        /// Also write sampled utterance representations to this CSV.
        #[arg(long)]
        dump_emb: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        sample_per_position: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Greedy responses for JSONL histories (`{"history": [...]}` per line).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// PPL under each history perturbation.
    PerturbEval {
        #[command(flatten)]
        src: DataSource,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Subset of perturbation kinds; all five by default.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
    },
    /// Ranking accuracy and mean ranking loss for a checkpoint.
    RankProbe {
        #[command(flatten)]
        src: DataSource,
    },
    /// Write sampled utterance representations as CSV.
    DumpEmbeddings {
        #[command(flatten)]
        src: DataSource,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        sample_per_position: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct DataSource {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dialogue JSONL to evaluate on.
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    /// Run config; its `data.test` (else `data.valid`) split is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Everything besides the parameters needed to rebuild a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub corpus: CorpusConfig,
    pub seed: u64,
}

/// A checkpoint loaded together with its model and vocabulary.
pub struct Loaded {
    pub model: RedModel,
    pub params: ParameterSet,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

pub fn load_model(path: &Path) -> Result<Loaded> {
    let (saved, meta) = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let vocab = Vocab::from_tokens(meta.vocab.iter().cloned());
    let (model, mut params) = RedModel::init(&meta.model, vocab.len(), meta.seed)?;
    restore_into(&mut params, &saved)?;
    Ok(Loaded {
        model,
        params,
        vocab,
        meta,
    })
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match dispatch(cli.command, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_split(
    path: &Path,
    vocab: &Vocab,
    corpus: &CorpusConfig,
) -> Result<Vec<HistoryResponsePair>> {
    let loaded = load_corpus(path)?;
    if loaded.dropped > 0 {
        eprintln!(
            "{}: skipped {} dialogues with fewer than two utterances",
            path.display(),
            loaded.dropped
        );
    }
    prepare_pairs(&loaded.dialogues, vocab, corpus)
}

fn resolve_data(src: &DataSource) -> Result<PathBuf> {
    if let Some(p) = &src.data {
        return Ok(p.clone());
    }
    if let Some(c) = &src.config {
        let cfg = RunConfig::load(c)?;
        return cfg
            .data
            .test
            .or(cfg.data.valid)
            .ok_or_else(|| Error::Config("config has neither data.test nor data.valid".into()));
    }
    Err(Error::Config("pass --data or --config".into()))
}

fn load_source(src: &DataSource) -> Result<(Loaded, Vec<HistoryResponsePair>)> {
    let loaded = load_model(&src.ckpt)?;
    let path = resolve_data(src)?;
    let pairs = load_split(&path, &loaded.vocab, &loaded.meta.corpus)?;
    Ok((loaded, pairs))
}

fn vocab_for(cfg: &RunConfig, train: &[RawDialogue]) -> Result<Vocab> {
    match &cfg.data.vocab {
        Some(p) if p.exists() => Vocab::load(p),
        _ => build_vocab(train, cfg.data.min_count, cfg.data.max_vocab),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("config is missing `{key}`")))
}

fn dispatch(cmd: Command, exec: Execution) -> Result<()> {
    match cmd {
        Command::Prepare { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let train_path = require(&cfg.data.train, "data.train")?;
            let train = load_corpus(train_path)?;
            let vocab = vocab_for(&cfg, &train.dialogues)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let vocab_path = out_dir.join("vocab.json");
            vocab.save(&vocab_path)?;
            let mut splits = serde_json::Map::new();
            for (name, path) in [
                ("train", &cfg.data.train),
                ("valid", &cfg.data.valid),
                ("test", &cfg.data.test),
            ] {
                let Some(path) = path else { continue };
                let pairs = load_split(path, &vocab, &cfg.data.corpus())?;
                let cache = out_dir.join(format!("{name}.pairs.bin"));
                write_pair_cache(&cache, &pairs)?;
                splits.insert(
                    name.into(),
                    serde_json::json!({ "pairs": pairs.len(), "cache": cache }),
                );
            }
            print_json(
                &serde_json::json!({ "vocab_size": vocab.len(), "vocab": vocab_path, "splits": splits }),
            )
        }
        Command::Train {
            config,
            seed,
            resume,
            checkpoint,
            log,
            max_epochs,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if checkpoint.is_some() {
                cfg.train.checkpoint = checkpoint;
            }
            if log.is_some() {
                cfg.train.log = log;
            }
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            if exec == Execution::Sequential {
                cfg.train.parallel = false;
            }
            let train_raw = load_corpus(require(&cfg.data.train, "data.train")?)?;
            let vocab = vocab_for(&cfg, &train_raw.dialogues)?;
            let corpus = cfg.data.corpus();
            let train_pairs = prepare_pairs(&train_raw.dialogues, &vocab, &corpus)?;
            let valid_pairs = load_split(require(&cfg.data.valid, "data.valid")?, &vocab, &corpus)?;

            let model_cfg = cfg.model();
            let (model, mut params) = RedModel::init(&model_cfg, vocab.len(), cfg.train.seed)?;
            if let Some(r) = &resume {
                let prior = load_model(r)?;
                if prior.meta.model != model_cfg || prior.vocab.tokens() != vocab.tokens() {
                    return Err(Error::Config(format!(
                        "{} was trained with a different model or vocabulary",
                        r.display()
                    )));
                }
                params = prior.params;
            }
            let mut opts = TrainOptions::from_config(&cfg);
            opts.verbose = true;
            opts.checkpoint_meta = serde_json::to_value(CheckpointMeta {
                model: model_cfg,
                vocab: vocab.tokens().to_vec(),
                corpus,
                seed: cfg.train.seed,
            })?;
            eprintln!(
                "training on {} pairs ({} validation), vocab {}, {} parameters",
                train_pairs.len(),
                valid_pairs.len(),
                vocab.len(),
                params.num_scalars()
            );
            let out = trainer::train(&model, &mut params, &train_pairs, &valid_pairs, &opts)?;
            print_json(&serde_json::json!({
                "best_epoch": out.best_epoch,
                "best_valid_ppl": out.best_valid_ppl,
                "epochs_run": out.epochs_run,
                "stopped_early": out.stopped_early,
                "checkpoint": cfg.train.checkpoint,
            }))
        }
        Command::Eval {
            src,
            buckets,
            reference,
            perturb,
            perturb_seeds,
            dump_emb,
            sample_per_position,
            seed,
        } => {
            let (l, pairs) = load_source(&src)?;
            let mut report = eval::evaluate(&l.model, &l.params, &pairs, exec)?;
            if let Some(spec) = buckets {
                let b: Buckets = spec.parse()?;
                let mut rows = eval::ppl_by_history_length(&l.model, &l.params, &pairs, &b, exec)?;
                if let Some(r) = reference {
                    let base = load_model(&r)?;
                    let base_rows =
                        eval::ppl_by_history_length(&base.model, &base.params, &pairs, &b, exec)?;
                    eval::with_reference(&mut rows, &base_rows)?;
                }
                report.buckets = Some(rows);
            }
            if perturb {
                report.perturbation = Some(eval::perturbation_report(
                    &l.model,
                    &l.params,
                    &pairs,
                    &PerturbKind::ALL,
                    &perturb_seeds,
                    exec,
                )?);
            }
            if let Some(path) = dump_emb {
                eval::dump_utterance_embeddings(
                    &l.model,
                    &l.params,
                    &pairs,
                    sample_per_position,
                    seed,
                    &path,
                    exec,
                )?;
            }
            print_json(&report)
        }
        Command::Generate {
            ckpt,
            input,
            output,
            max_len,
        } => {
            let l = load_model(&ckpt)?;
            let histories = read_histories(&input, &l.vocab, &l.meta.corpus)?;
            let pairs: Vec<HistoryResponsePair> = histories
                .into_iter()
                .enumerate()
                .map(|(i, history)| HistoryResponsePair {
                    history,
                    response: Utterance::from_tokens(vec![crate::corpus::UNK]),
                    dialogue_id: format!("h{i}"),
                    turn_index: 0,
                })
                .collect();
            let max_len = max_len.unwrap_or(l.model.config.decoder.max_decode_len);
            let gens = eval::generate_responses(&l.model, &l.params, &pairs, max_len, exec)?;
            let mut w = BufWriter::new(File::create(&output).map_err(|e| Error::io(&output, e))?);
            for o in &gens {
                let line = serde_json::json!({
                    "response": detokenize(&o.token_ids, &l.vocab),
                    "tokens": o.token_ids,
                    "stopped_by": o.stopped_by,
                });
                writeln!(w, "{line}").map_err(|e| Error::io(&output, e))?;
            }
            w.flush().map_err(|e| Error::io(&output, e))?;
            print_json(&serde_json::json!({ "generated": gens.len(), "output": output }))
        }
        Command::PerturbEval { src, seeds, kinds } => {
            let (l, pairs) = load_source(&src)?;
            let kinds: Vec<PerturbKind> = if kinds.is_empty() {
                PerturbKind::ALL.to_vec()
            } else {
                kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?
            };
            print_json(&eval::perturbation_report(
                &l.model, &l.params, &pairs, &kinds, &seeds, exec,
            )?)
        }
        Command::RankProbe { src } => {
            let (l, pairs) = load_source(&src)?;
            print_json(&eval::rank_probe(&l.model, &l.params, &pairs, exec)?)
        }
        Command::DumpEmbeddings {
            src,
            output,
            sample_per_position,
            seed,
        } => {
            let (l, pairs) = load_source(&src)?;
            let rows = eval::dump_utterance_embeddings(
                &l.model,
                &l.params,
                &pairs,
                sample_per_position,
                seed,
                &output,
                exec,
            )?;
            print_json(&serde_json::json!({ "rows": rows, "output": output }))
        }
    }
}

#[derive(Deserialize)]
struct HistoryLine {
    history: Vec<String>,
}

fn read_histories(
    path: &Path,
    vocab: &Vocab,
    corpus: &CorpusConfig,
) -> Result<Vec<Vec<Utterance>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: HistoryLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if rec.history.is_empty() {
            return Err(parse("empty history".into()));
        }
        let h = rec
            .history
            .iter()
            .map(|u| tokenize(u, vocab, corpus.max_utterance_len))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse(e.to_string()))?;
        out.push(h);
    }
    Ok(out)
}
