//! Model and run configuration.
//!
//! Run configs are TOML documents written as flat dotted keys, e.g.
//!
//! ```toml
//! data.train = "train.jsonl"
//! data.valid = "valid.jsonl"
//! encoder.kind = "hier_lstm"
//! rank.mode = "global"
//! rank.alpha = 0.01
//! train.seed = 7
//! ```
//!
//! Every key has a default; see the field docs below.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SeqLstm,
    SeqLstmAttn,
    SeqTransformer,
    HierLstm,
    HierTransformer,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [
        EncoderKind::SeqLstm,
        EncoderKind::SeqLstmAttn,
        EncoderKind::SeqTransformer,
        EncoderKind::HierLstm,
        EncoderKind::HierTransformer,
    ];

    pub fn is_sequential(self) -> bool {
        matches!(
            self,
            EncoderKind::SeqLstm | EncoderKind::SeqLstmAttn | EncoderKind::SeqTransformer
        )
    }

    pub fn is_hierarchical(self) -> bool {
        !self.is_sequential()
    }

    /// Whether the top encoder is a transformer (these models train with
    /// the smaller default learning rate).
    pub fn is_transformer_family(self) -> bool {
        matches!(
            self,
            EncoderKind::SeqTransformer | EncoderKind::HierTransformer
        )
    }

    /// Whether the encoder ends in a recurrent layer whose final state can
    /// seed an LSTM decoder directly.
    pub fn has_recurrent_state(self) -> bool {
        matches!(
            self,
            EncoderKind::SeqLstm | EncoderKind::SeqLstmAttn | EncoderKind::HierLstm
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Lstm,
    LstmAttn,
    Transformer,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [
        DecoderKind::Lstm,
        DecoderKind::LstmAttn,
        DecoderKind::Transformer,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Off,
    Local,
    Global,
}

impl RankMode {
    pub const ALL: [RankMode; 3] = [RankMode::Off, RankMode::Local, RankMode::Global];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// concat(q, u) -> tanh hidden layer -> scalar
    #[serde(rename = "mlp128")]
    Mlp,
    /// single affine map of concat(q, u)
    Linear,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or_default())
            }
        }
    )*};
}
display_via_serde!(EncoderKind, DecoderKind, RankMode, ScorerKind);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Capacity of learned position embeddings (tokens for seq_transformer,
    /// utterances for hier_transformer).
    pub max_positions: usize,
    /// Insert an EOS separator after each utterance in sequential encoders.
    pub sep_token: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::SeqLstm,
            embed_dim: 128,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 2,
            max_positions: 512,
            sep_token: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_decode_len: usize,
    /// Position-embedding capacity of the transformer decoder (BOS included).
    pub max_positions: usize,
    /// Start with a zero output projection, i.e. a uniform next-token
    /// distribution.
    pub zero_output_init: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Lstm,
            embed_dim: 128,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 2,
            max_decode_len: 32,
            max_positions: 64,
            zero_output_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub mode: RankMode,
    /// Window size for local queries.
    pub k: usize,
    pub scorer: ScorerKind,
    pub alpha: f64,
    pub query_hidden: usize,
    pub scorer_hidden: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            mode: RankMode::Off,
            k: 2,
            scorer: ScorerKind::Mlp,
            alpha: 0.01,
            query_hidden: 64,
            scorer_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub rank: RankConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (e, d, r) = (&self.encoder, &self.decoder, &self.rank);
        let bad = |m: String| Err(Error::Config(m));
        if e.embed_dim == 0 || e.hidden_dim == 0 || d.hidden_dim == 0 || d.embed_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if e.num_layers == 0 || d.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if d.hidden_dim != e.hidden_dim {
            return bad(format!(
                "decoder.hidden_dim ({}) must equal encoder.hidden_dim ({})",
                d.hidden_dim, e.hidden_dim
            ));
        }
        if e.kind.is_transformer_family() {
            if e.num_heads == 0 || e.hidden_dim % e.num_heads != 0 {
                return bad(format!(
                    "encoder.hidden_dim {} not divisible by encoder.num_heads {}",
                    e.hidden_dim, e.num_heads
                ));
            }
            if e.max_positions < 2 {
                return bad("encoder.max_positions must be at least 2".into());
            }
        }
        if e.kind == EncoderKind::SeqTransformer && e.embed_dim != e.hidden_dim {
            return bad("seq_transformer requires encoder.embed_dim == encoder.hidden_dim".into());
        }
        if d.kind == DecoderKind::Transformer {
            if d.num_heads == 0 || d.hidden_dim % d.num_heads != 0 {
                return bad(format!(
                    "decoder.hidden_dim {} not divisible by decoder.num_heads {}",
                    d.hidden_dim, d.num_heads
                ));
            }
            if d.embed_dim != d.hidden_dim {
                return bad(
                    "transformer decoder requires decoder.embed_dim == decoder.hidden_dim".into(),
                );
            }
            if d.max_positions < d.max_decode_len {
                return bad(format!(
                    "decoder.max_positions ({}) must be >= decoder.max_decode_len ({})",
                    d.max_positions, d.max_decode_len
                ));
            }
        }
        if d.kind != DecoderKind::Transformer
            && e.kind.has_recurrent_state()
            && d.num_layers != e.num_layers
        {
            return bad(format!(
                "LSTM decoder takes the encoder's final state: decoder.num_layers ({}) must equal encoder.num_layers ({})",
                d.num_layers, e.num_layers
            ));
        }
        if d.max_decode_len == 0 {
            return bad("decoder.max_decode_len must be >= 1".into());
        }
        if !(r.alpha >= 0.0 && r.alpha.is_finite()) {
            return bad(format!(
                "rank.alpha must be a finite value >= 0, got {}",
                r.alpha
            ));
        }
        if r.mode == RankMode::Local && !(1..=3).contains(&r.k) {
            return bad(format!("rank.k must be 1, 2 or 3, got {}", r.k));
        }
        if r.query_hidden == 0 || r.scorer_hidden == 0 {
            return bad("rank hidden sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Vocabulary file; built from `train` when absent.
    pub vocab: Option<PathBuf>,
    pub min_count: usize,
    pub max_vocab: usize,
    pub max_utt_len: usize,
    pub max_resp_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            vocab: None,
            min_count: 1,
            max_vocab: 50_000,
            max_utt_len: 32,
            max_resp_len: 32,
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            max_utterance_len: self.max_utt_len,
            max_response_len: self.max_resp_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    /// Defaults to 0.005 for LSTM-family encoders, 0.001 for transformer-family.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Shard per-pair gradients across threads (needs the `parallel` feature).
    pub parallel: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: None,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            grad_clip: 5.0,
            checkpoint: None,
            log: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub rank: RankConfig,
    pub train: TrainParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model().validate()?;
        cfg.validate_train()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            rank: self.rank.clone(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.train
            .lr
            .unwrap_or(if self.encoder.kind.is_transformer_family() {
                0.001
            } else {
                0.005
            })
    }

    fn validate_train(&self) -> Result<()> {
        let t = &self.train;
        if t.patience < 1 {
            return Err(Error::Config("train.patience must be >= 1".into()));
        }
        if t.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(lr) = t.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "train.lr must be positive, got {lr}"
                )));
            }
        }
        Ok(())
    }
}
