//! Full model: encoder, decoder and the optional ranking aggregator, plus
//! the per-pair joint loss `L_gen + alpha * L_rank`.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RankMode};
use crate::corpus::HistoryResponsePair;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::ranking::{self, QueryAggregator};
use crate::rng::{stream_rng, Stream};
use crate::substrate::{Graph, ParameterSet, Tensor, Var};

#[derive(Debug, Clone)]
pub struct RedModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Present only when ranking is enabled.
    pub aggregator: Option<QueryAggregator>,
}

/// Graph nodes of one pair's forward pass.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub encoded: EncoderOutput,
    pub gen: Var,
    pub rank: Var,
    /// What gets differentiated. Equals `gen` when `alpha == 0`.
    pub total: Var,
    pub tokens: usize,
    pub instances: usize,
}

/// Scalar losses of a set of pairs, averaged per pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen: f64,
    pub rank: f64,
    pub total: f64,
    pub tokens: usize,
    pub instances: usize,
}

impl RedModel {
    /// Builds a fresh parameter set. Encoder and decoder draw from the init
    /// stream; the ranking aggregator draws from its own stream afterwards so
    /// enabling it never changes the other initial weights.
    pub fn init(
        config: &ModelConfig,
        vocab_size: usize,
        seed: u64,
    ) -> Result<(Self, ParameterSet)> {
        let mut params = ParameterSet::new();
        let model = Self::build(config, vocab_size, seed, &mut params)?;
        Ok((model, params))
    }

    pub fn build(
        config: &ModelConfig,
        vocab_size: usize,
        seed: u64,
        params: &mut ParameterSet,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} entries is too small"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let encoder = Encoder::new(params, &config.encoder, vocab_size, &mut rng)?;
        let decoder = Decoder::new(
            params,
            &config.decoder,
            config.encoder.kind,
            vocab_size,
            &mut rng,
        )?;
        let aggregator = match config.rank.mode {
            RankMode::Off => None,
            _ => {
                let mut rng = stream_rng(seed, Stream::RankInit);
                Some(QueryAggregator::new(
                    params,
                    &config.rank,
                    config.encoder.hidden_dim,
                    &mut rng,
                )?)
            }
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            encoder,
            decoder,
            aggregator,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.config.rank.alpha
    }

    pub fn encode(&self, g: &mut Graph, pair: &HistoryResponsePair) -> Result<EncoderOutput> {
        self.encoder.encode(g, &pair.history)
    }

    /// Ranking loss over `U` for the configured mode, with instance count.
    pub fn rank_loss(&self, g: &mut Graph, u: Var) -> Result<(Var, usize)> {
        let m = g.value(u).rows();
        match (&self.aggregator, self.config.rank.mode) {
            (Some(agg), RankMode::Local) => {
                let k = self.config.rank.k;
                Ok((ranking::local_rank_loss(g, u, k, agg)?, m.saturating_sub(k)))
            }
            (Some(agg), RankMode::Global) => {
                Ok((ranking::global_rank_loss(g, u, agg)?, m.saturating_sub(1)))
            }
            _ => Ok((g.leaf(Tensor::scalar(0.0)), 0)),
        }
    }

    /// Forward pass for one pair.
    pub fn forward(&self, g: &mut Graph, pair: &HistoryResponsePair) -> Result<PairForward> {
        let encoded = self.encode(g, pair)?;
        let gl = self.decoder.generation_loss(g, &encoded, &pair.response)?;
        let (rank, instances) = self.rank_loss(g, encoded.utterance_reprs)?;
        let alpha = self.alpha();
        let total = if alpha == 0.0 || self.aggregator.is_none() {
            gl.loss
        } else {
            let r = g.scale(rank, alpha);
            g.add(gl.loss, r)
        };
        Ok(PairForward {
            encoded,
            gen: gl.loss,
            rank,
            total,
            tokens: gl.tokens,
            instances,
        })
    }

    /// Generation-only pass: summed NLL and target token count.
    pub fn nll(&self, params: &ParameterSet, pair: &HistoryResponsePair) -> Result<(f64, usize)> {
        let mut g = Graph::new(params);
        let enc = self.encode(&mut g, pair)?;
        let gl = self.decoder.generation_loss(&mut g, &enc, &pair.response)?;
        Ok((g.scalar(gl.loss), gl.tokens))
    }
}
