#![allow(dead_code)]

use red_core::config::{DecoderKind, EncoderKind, ModelConfig, RankMode, ScorerKind};
use red_core::corpus::{HistoryResponsePair, Utterance};
use red_core::model::RedModel;
use red_core::substrate::ParameterSet;

pub const TINY_VOCAB: usize = 7;

/// Small enough for exhaustive finite differences.
pub fn tiny_config(enc: EncoderKind, dec: DecoderKind, mode: RankMode) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.kind = enc;
    c.encoder.embed_dim = 2;
    c.encoder.hidden_dim = 2;
    c.encoder.num_layers = 1;
    c.encoder.num_heads = 1;
    c.encoder.max_positions = 16;
    c.decoder.kind = dec;
    c.decoder.embed_dim = 2;
    c.decoder.hidden_dim = 2;
    c.decoder.num_layers = 1;
    c.decoder.num_heads = 1;
    c.decoder.max_decode_len = 4;
    c.decoder.max_positions = 8;
    c.rank.mode = mode;
    c.rank.k = 1;
    c.rank.alpha = 0.5;
    c.rank.query_hidden = 2;
    c.rank.scorer_hidden = 2;
    c.rank.scorer = ScorerKind::Mlp;
    c
}

/// Compact but trainable configuration for the small-corpus experiments.
pub fn small_config(enc: EncoderKind, mode: RankMode, alpha: f64) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.kind = enc;
    c.encoder.embed_dim = 16;
    c.encoder.hidden_dim = 32;
    c.encoder.num_layers = 1;
    c.decoder.embed_dim = 16;
    c.decoder.hidden_dim = 32;
    c.decoder.num_layers = 1;
    c.rank.mode = mode;
    c.rank.alpha = alpha;
    c.rank.query_hidden = 16;
    c.rank.scorer_hidden = 32;
    c
}

pub fn utt(tokens: &[u32]) -> Utterance {
    Utterance::from_tokens(tokens.to_vec())
}

pub fn pair(history: &[&[u32]], response: &[u32]) -> HistoryResponsePair {
    HistoryResponsePair {
        history: history.iter().map(|t| utt(t)).collect(),
        response: utt(response),
        dialogue_id: "fx".into(),
        turn_index: history.len(),
    }
}

/// Pairs over token ids `4..TINY_VOCAB`.
pub fn tiny_pairs() -> Vec<HistoryResponsePair> {
    vec![
        pair(&[&[4, 5], &[6], &[5, 4]], &[6, 4]),
        pair(&[&[5]], &[4]),
    ]
}

pub fn set_param(params: &mut ParameterSet, name: &str, f: impl Fn(usize, usize) -> f64) {
    let id = params
        .id(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    let t = params.value_mut(id);
    let cols = t.cols();
    for (k, v) in t.values_mut().iter_mut().enumerate() {
        *v = f(k / cols, k % cols);
    }
}

/// seq_lstm + 1-layer LSTM decoder over an 8-token vocabulary whose greedy
/// path and gold continuation is BOS -> 5 -> 6 -> 7 -> EOS regardless of
/// the history. `scale` multiplies the output weights.
pub fn spelling_model(scale: f64) -> (RedModel, ParameterSet) {
    let mut c = ModelConfig::default();
    c.encoder.embed_dim = 8;
    c.encoder.hidden_dim = 8;
    c.encoder.num_layers = 1;
    c.decoder.kind = DecoderKind::Lstm;
    c.decoder.embed_dim = 8;
    c.decoder.hidden_dim = 8;
    c.decoder.num_layers = 1;
    let (model, mut params) = RedModel::init(&c, 8, 0).unwrap();
    let h = 8;
    set_param(&mut params, "dec.embed", |r, c| f64::from(u8::from(r == c)));
    set_param(&mut params, "dec.lstm.l0.w_h", |_, _| 0.0);
    set_param(&mut params, "dec.lstm.l0.w_x", |r, c| {
        if c / h == 2 && c % h == r {
            10.0
        } else {
            0.0
        }
    });
    set_param(&mut params, "dec.lstm.l0.b", |_, c| match c / h {
        1 => -20.0,
        2 => 0.0,
        _ => 20.0,
    });
    let next = |t: usize| match t {
        2 => 5,
        5 => 6,
        6 => 7,
        _ => 3,
    };
    set_param(&mut params, "dec.out.w", |r, c| {
        if next(r) == c {
            scale
        } else {
            0.0
        }
    });
    set_param(&mut params, "dec.out.b", |_, _| 0.0);
    (model, params)
}
