//! Utterance representation: turns a tokenized history into the matrix
//! `U = [u_1; ...; u_M]` plus attention memory for the decoder.
//!
//! Sequential kinds run one encoder over the concatenated history and take
//! `u_j` as the mean of the output states of utterance `j`'s own tokens.
//! Hierarchical kinds encode each utterance with a word-level LSTM and run
//! an inter-utterance LSTM or transformer over the results.

use std::ops::Range;

use rand::Rng;

use crate::config::{EncoderConfig, EncoderKind};
use crate::corpus::{Utterance, EOS};
use crate::error::{Error, Result};
use crate::substrate::layers::{LstmStack, LstmState, TransformerEncoderLayer};
use crate::substrate::{Graph, ParamId, ParameterSet, Var};

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `M x d` utterance representations, one row per retained utterance.
    pub utterance_reprs: Var,
    /// Per-utterance word states (`len_j x d` each). Sequential encoders
    /// slice these out of the shared sequence.
    pub word_states: Vec<Var>,
    /// What attention decoders attend over: every word state for sequential
    /// kinds, the rows of `U` for hierarchical kinds.
    pub memory: Var,
    /// Final per-layer state of the top recurrent encoder, if it has one.
    pub final_state: Option<Vec<LstmState>>,
    pub kind: EncoderKind,
    pub num_utterances: usize,
    /// Oldest utterances dropped to fit the position-embedding capacity.
    pub truncated: usize,
    /// Token positions of each utterance in the flattened sequence
    /// (sequential kinds only).
    pub spans: Vec<Range<usize>>,
}

#[derive(Debug, Clone)]
enum Body {
    SeqLstm {
        lstm: LstmStack,
    },
    SeqTransformer {
        pos: ParamId,
        layers: Vec<TransformerEncoderLayer>,
    },
    HierLstm {
        word: LstmStack,
        inter: LstmStack,
    },
    HierTransformer {
        word: LstmStack,
        pos: ParamId,
        layers: Vec<TransformerEncoderLayer>,
    },
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: ParamId,
    body: Body,
}

impl Encoder {
    pub fn new(
        params: &mut ParameterSet,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (e, h, n) = (cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
        let embed = add_embedding(params, "enc.embed", vocab_size, e, rng)?;
        let body = match cfg.kind {
            EncoderKind::SeqLstm | EncoderKind::SeqLstmAttn => Body::SeqLstm {
                lstm: LstmStack::new(params, "enc.lstm", e, h, n, rng)?,
            },
            EncoderKind::SeqTransformer => {
                let pos = add_embedding(params, "enc.pos", cfg.max_positions, h, rng)?;
                Body::SeqTransformer {
                    pos,
                    layers: transformer_stack(params, cfg, rng)?,
                }
            }
            EncoderKind::HierLstm => Body::HierLstm {
                word: LstmStack::new(params, "enc.word", e, h, n, rng)?,
                inter: LstmStack::new(params, "enc.inter", h, h, n, rng)?,
            },
            EncoderKind::HierTransformer => {
                let word = LstmStack::new(params, "enc.word", e, h, n, rng)?;
                let pos = add_embedding(params, "enc.pos", cfg.max_positions, h, rng)?;
                Body::HierTransformer {
                    word,
                    pos,
                    layers: transformer_stack(params, cfg, rng)?,
                }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            body,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn kind(&self) -> EncoderKind {
        self.cfg.kind
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Dispatches on the configured kind.
    pub fn encode(&self, g: &mut Graph, history: &[Utterance]) -> Result<EncoderOutput> {
        if self.cfg.kind.is_sequential() {
            self.encode_sequential(g, history)
        } else {
            self.encode_hierarchical(g, history)
        }
    }

    pub fn encode_sequential(&self, g: &mut Graph, history: &[Utterance]) -> Result<EncoderOutput> {
        if !self.cfg.kind.is_sequential() {
            return Err(Error::Config(format!(
                "{} is not a sequential encoder",
                self.cfg.kind
            )));
        }
        check_history(history)?;
        let sep = usize::from(self.cfg.sep_token);

        // Drop oldest utterances until the flattened sequence fits.
        let mut start = 0;
        if matches!(self.body, Body::SeqTransformer { .. }) {
            let cap = self.cfg.max_positions;
            let total = |from: usize| history[from..].iter().map(|u| u.len() + sep).sum::<usize>();
            while start + 1 < history.len() && total(start) > cap {
                start += 1;
            }
        }
        let kept = &history[start..];
        // a single over-long utterance keeps its most recent tokens
        let mut last_cut = 0;
        if matches!(self.body, Body::SeqTransformer { .. }) {
            let room = self.cfg.max_positions.saturating_sub(sep).max(1);
            last_cut = kept[kept.len() - 1].len().saturating_sub(room);
        }

        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(kept.len());
        for (j, u) in kept.iter().enumerate() {
            let skip = if j + 1 == kept.len() { last_cut } else { 0 };
            let from = tokens.len();
            tokens.extend(u.tokens[skip..].iter().map(|&t| t as usize));
            spans.push(from..tokens.len());
            if sep == 1 {
                tokens.push(EOS as usize);
            }
        }

        let table = g.param(self.embed);
        let x = g.gather_rows(table, &tokens);
        let (states, final_state) = match &self.body {
            Body::SeqLstm { lstm } => {
                let (out, finals) = lstm.forward(g, x, None)?;
                (out, Some(finals))
            }
            Body::SeqTransformer { pos, layers } => {
                let pos_table = g.param(*pos);
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let p = g.gather_rows(pos_table, &positions);
                let mut h = g.add(x, p);
                for layer in layers {
                    h = layer.forward(g, h);
                }
                (h, None)
            }
            _ => unreachable!(),
        };

        let mut rows = Vec::with_capacity(spans.len());
        let mut word_states = Vec::with_capacity(spans.len());
        for s in &spans {
            let ws = g.slice_rows(states, s.start, s.len());
            rows.push(g.mean_rows(ws));
            word_states.push(ws);
        }
        let u = g.concat_rows(&rows);
        Ok(EncoderOutput {
            utterance_reprs: u,
            word_states,
            memory: states,
            final_state,
            kind: self.cfg.kind,
            num_utterances: kept.len(),
            truncated: start,
            spans,
        })
    }

    pub fn encode_hierarchical(
        &self,
        g: &mut Graph,
        history: &[Utterance],
    ) -> Result<EncoderOutput> {
        let word = match &self.body {
            Body::HierLstm { word, .. } | Body::HierTransformer { word, .. } => word,
            _ => {
                return Err(Error::Config(format!(
                    "{} is not a hierarchical encoder",
                    self.cfg.kind
                )))
            }
        };
        check_history(history)?;
        let mut start = 0;
        if matches!(self.body, Body::HierTransformer { .. })
            && history.len() > self.cfg.max_positions
        {
            start = history.len() - self.cfg.max_positions;
        }
        let kept = &history[start..];

        let table = g.param(self.embed);
        let mut summaries = Vec::with_capacity(kept.len());
        let mut word_states = Vec::with_capacity(kept.len());
        for u in kept {
            let ids: Vec<usize> = u.tokens.iter().map(|&t| t as usize).collect();
            let x = g.gather_rows(table, &ids);
            let (out, finals) = word.forward(g, x, None)?;
            summaries.push(finals.last().expect("at least one layer").h);
            word_states.push(out);
        }
        let seq = g.concat_rows(&summaries);

        let (u, final_state) = match &self.body {
            Body::HierLstm { inter, .. } => {
                let (out, finals) = inter.forward(g, seq, None)?;
                (out, Some(finals))
            }
            Body::HierTransformer { pos, layers, .. } => {
                let pos_table = g.param(*pos);
                let positions: Vec<usize> = (0..kept.len()).collect();
                let p = g.gather_rows(pos_table, &positions);
                let mut h = g.add(seq, p);
                for layer in layers {
                    h = layer.forward(g, h);
                }
                (h, None)
            }
            _ => unreachable!(),
        };
        Ok(EncoderOutput {
            utterance_reprs: u,
            word_states,
            memory: u,
            final_state,
            kind: self.cfg.kind,
            num_utterances: kept.len(),
            truncated: start,
            spans: Vec::new(),
        })
    }
}

fn transformer_stack(
    params: &mut ParameterSet,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TransformerEncoderLayer>> {
    (0..cfg.num_layers)
        .map(|l| {
            TransformerEncoderLayer::new(
                params,
                &format!("enc.tf{l}"),
                cfg.hidden_dim,
                cfg.num_heads,
                rng,
            )
        })
        .collect()
}

fn check_history(history: &[Utterance]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::Empty("history has no utterances"));
    }
    if history.iter().any(Utterance::is_empty) {
        return Err(Error::Empty("history contains an empty utterance"));
    }
    Ok(())
}

/// Embedding table initialised from U(-1/sqrt(dim), 1/sqrt(dim)).
pub(crate) fn add_embedding(
    params: &mut ParameterSet,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let bound = 1.0 / (dim as f64).sqrt();
    let values = (0..rows * dim)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    params.add(name, crate::substrate::Tensor::from_vec(rows, dim, values))
}
