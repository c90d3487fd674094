//! Response generation conditioned on an encoded history.
//!
//! Training is teacher-forced: the decoder reads `[BOS, v_1 .. v_L]` and is
//! scored on `[v_1 .. v_L, EOS]`. LSTM decoders start from the encoder's
//! final recurrent state when it has one, otherwise from a learned bridge
//! `tanh(mean(U) W + b)` with a zero cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderConfig, DecoderKind, EncoderKind};
use crate::corpus::{Utterance, BOS, EOS};
use crate::encoder::{add_embedding, EncoderOutput};
use crate::error::{Error, Result};
use crate::substrate::graph::log_softmax;
use crate::substrate::layers::{
    causal_mask, lstm_forward_matrix, Linear, LstmStack, LstmState, TransformerDecoderLayer,
};
use crate::substrate::{Graph, ParamId, ParameterSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// Emitted tokens, EOS excluded.
    pub token_ids: Vec<u32>,
    /// Full next-token log-distribution at every step taken.
    pub step_log_probs: Vec<Vec<f64>>,
    pub stopped_by: StopReason,
}

#[derive(Debug, Clone)]
pub struct GenLoss {
    /// Summed negative log-likelihood of the target, EOS included.
    pub loss: Var,
    pub token_log_probs: Vec<f64>,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
enum Body {
    Lstm {
        lstm: LstmStack,
        bridge: Vec<Linear>,
        combine: Option<Linear>,
    },
    Transformer {
        pos: ParamId,
        layers: Vec<TransformerDecoderLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    embed: ParamId,
    body: Body,
    out: Linear,
}

impl Decoder {
    pub fn new(
        params: &mut ParameterSet,
        cfg: &DecoderConfig,
        encoder: EncoderKind,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let embed = add_embedding(params, "dec.embed", vocab_size, e, rng)?;
        let body = match cfg.kind {
            DecoderKind::Lstm | DecoderKind::LstmAttn => {
                let lstm = LstmStack::new(params, "dec.lstm", e, h, cfg.num_layers, rng)?;
                let bridge = if encoder.has_recurrent_state() {
                    Vec::new()
                } else {
                    (0..cfg.num_layers)
                        .map(|l| Linear::new(params, &format!("dec.bridge.l{l}"), h, h, true, rng))
                        .collect::<Result<_>>()?
                };
                let combine = match cfg.kind {
                    DecoderKind::LstmAttn => {
                        Some(Linear::new(params, "dec.combine", 2 * h, h, true, rng)?)
                    }
                    _ => None,
                };
                Body::Lstm {
                    lstm,
                    bridge,
                    combine,
                }
            }
            DecoderKind::Transformer => {
                let pos = add_embedding(params, "dec.pos", cfg.max_positions, h, rng)?;
                let layers = (0..cfg.num_layers)
                    .map(|l| {
                        TransformerDecoderLayer::new(
                            params,
                            &format!("dec.tf{l}"),
                            h,
                            cfg.num_heads,
                            rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                Body::Transformer { pos, layers }
            }
        };
        let out = Linear::new(params, "dec.out", h, vocab_size, true, rng)?;
        if cfg.zero_output_init {
            params.value_mut(out.w).values_mut().fill(0.0);
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            body,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Output projection `h -> |V|`.
    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    fn initial_states(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Vec<LstmState>> {
        let Body::Lstm { bridge, lstm, .. } = &self.body else {
            return Ok(Vec::new());
        };
        if bridge.is_empty() {
            let states = enc.final_state.clone().ok_or_else(|| {
                Error::Config(format!("{} encoder has no recurrent state", enc.kind))
            })?;
            if states.len() != lstm.num_layers() {
                return Err(Error::Config(format!(
                    "encoder provides {} layer states, decoder has {} layers",
                    states.len(),
                    lstm.num_layers()
                )));
            }
            return Ok(states);
        }
        let mean = g.mean_rows(enc.utterance_reprs);
        Ok(bridge
            .iter()
            .map(|b| {
                let pre = b.forward(g, mean);
                let h = g.tanh(pre);
                let c = g.leaf(Tensor::zeros(1, self.cfg.hidden_dim));
                LstmState { h, c }
            })
            .collect())
    }

    /// Maps LSTM outputs (`T x h`) to logits, attending over `memory` first
    /// when configured.
    fn lstm_head(&self, g: &mut Graph, out: Var, memory: Var, combine: Option<&Linear>) -> Var {
        let h = match combine {
            Some(c) => {
                let mt = g.transpose(memory);
                let scores = g.matmul(out, mt);
                let attn = g.softmax_rows(scores, None);
                let ctx = g.matmul(attn, memory);
                let cat = g.concat_cols(&[out, ctx]);
                let z = c.forward(g, cat);
                g.tanh(z)
            }
            None => out,
        };
        self.out.forward(g, h)
    }

    fn check_inputs(&self, inputs: &[usize]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Empty("decoder input"));
        }
        if matches!(self.body, Body::Transformer { .. }) && inputs.len() > self.cfg.max_positions {
            return Err(Error::Data(format!(
                "decoder input of {} positions exceeds decoder.max_positions = {}",
                inputs.len(),
                self.cfg.max_positions
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits (`T x |V|`) for the input token sequence.
    pub fn logits(&self, g: &mut Graph, enc: &EncoderOutput, inputs: &[usize]) -> Result<Var> {
        match &self.body {
            Body::Lstm { lstm, combine, .. } => {
                self.check_inputs(inputs)?;
                let table = g.param(self.embed);
                let x = g.gather_rows(table, inputs);
                let init = self.initial_states(g, enc)?;
                let (out, _) = lstm.forward(g, x, Some(&init))?;
                Ok(self.lstm_head(g, out, enc.memory, combine.as_ref()))
            }
            Body::Transformer { .. } => self.transformer_logits(g, enc.memory, inputs),
        }
    }

    fn transformer_logits(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Result<Var> {
        let Body::Transformer { pos, layers } = &self.body else {
            unreachable!("transformer_logits on an LSTM decoder");
        };
        self.check_inputs(inputs)?;
        let table = g.param(self.embed);
        let x = g.gather_rows(table, inputs);
        let pos_table = g.param(*pos);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let p = g.gather_rows(pos_table, &positions);
        let mut h = g.add(x, p);
        let mask = causal_mask(inputs.len());
        for layer in layers {
            h = layer.forward(g, h, memory, &mask);
        }
        Ok(self.out.forward(g, h))
    }

    /// Summed teacher-forced negative log-likelihood of `response` + EOS.
    pub fn generation_loss(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        response: &Utterance,
    ) -> Result<GenLoss> {
        if response.is_empty() {
            return Err(Error::Empty("response has no tokens"));
        }
        let mut inputs = Vec::with_capacity(response.len() + 1);
        inputs.push(BOS as usize);
        inputs.extend(response.tokens.iter().map(|&t| t as usize));
        let targets: Vec<usize> = inputs[1..].iter().copied().chain([EOS as usize]).collect();

        let logits = self.logits(g, enc, &inputs)?;
        let lp = g.log_softmax_rows(logits);
        let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(t, &y)| (t, y)).collect();
        let picked = g.pick(lp, &at);
        let token_log_probs = g.value(picked).values().to_vec();
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0);
        Ok(GenLoss {
            loss,
            token_log_probs,
            tokens: targets.len(),
        })
    }

    /// Incremental decoding state positioned after BOS.
    pub fn stepper<'d>(&'d self, g: &mut Graph, enc: &EncoderOutput) -> Result<Stepper<'d>> {
        let states = self.initial_states(g, enc)?;
        Ok(Stepper {
            dec: self,
            memory: enc.memory,
            states,
            prefix: Vec::new(),
        })
    }

    /// Greedy decoding: argmax at every step (ties to the lowest id) until
    /// EOS or `max_len` steps.
    pub fn generate_greedy(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        max_len: usize,
    ) -> Result<GenerationOutput> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        let mut stepper = self.stepper(g, enc)?;
        let mut token = BOS as usize;
        let mut out = GenerationOutput {
            token_ids: Vec::new(),
            step_log_probs: Vec::new(),
            stopped_by: StopReason::MaxLen,
        };
        for _ in 0..max_len {
            let lp = stepper.step(g, token)?;
            token = argmax(&lp);
            out.step_log_probs.push(lp);
            if token == EOS as usize {
                out.stopped_by = StopReason::Eos;
                break;
            }
            out.token_ids.push(token as u32);
        }
        Ok(out)
    }
}

/// Feeds one token at a time. LSTM decoders carry their state forward; the
/// transformer decoder recomputes over the accumulated prefix.
pub struct Stepper<'d> {
    dec: &'d Decoder,
    memory: Var,
    states: Vec<LstmState>,
    prefix: Vec<usize>,
}

impl Stepper<'_> {
    /// Consumes `token` and returns the log-distribution of the next one.
    pub fn step(&mut self, g: &mut Graph, token: usize) -> Result<Vec<f64>> {
        self.prefix.push(token);
        let dec = self.dec;
        let logits = match &dec.body {
            Body::Lstm { lstm, combine, .. } => {
                let table = g.param(dec.embed);
                let mut x = g.gather_rows(table, &[token]);
                for (l, w) in lstm.layers.iter().enumerate() {
                    let (o, s) = lstm_forward_matrix(g, x, self.states[l], w)?;
                    self.states[l] = s;
                    x = o;
                }
                dec.lstm_head(g, x, self.memory, combine.as_ref())
            }
            Body::Transformer { .. } => {
                let all = dec.transformer_logits(g, self.memory, &self.prefix)?;
                g.row(all, self.prefix.len() - 1)
            }
        };
        Ok(log_softmax(g.value(logits).values()))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
