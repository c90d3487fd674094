//! Self-supervised utterance ranking over the history representations.
//!
//! For query position `i` (1-based) the candidate documents are the rows
//! `u_{i+1} .. u_M` of `U` and only `u_{i+1}` is relevant. Queries are the
//! last hidden state of a single-layer LSTM run over either a sliding window
//! ending at `u_i` (local) or the whole prefix `u_1 .. u_i` (global). Each
//! instance is scored with Top1-ListMLE, the negative log-softmax of the
//! relevant candidate's score.

use rand::Rng;

use crate::config::{RankConfig, ScorerKind};
use crate::error::{Error, Result};
use crate::substrate::layers::{lstm_forward_matrix, Linear, LstmState, LstmWeights};
use crate::substrate::{log_softmax, Graph, ParameterSet, Tensor, Var};

#[derive(Debug, Clone)]
pub enum Scorer {
    /// `w2 . tanh(W1 [q, u] + b1) + b2`
    Mlp { hidden: Linear, out: Linear },
    /// `W [q, u] + b`
    Linear(Linear),
}

/// Query LSTM plus candidate scorer; one per model, shared by every window.
#[derive(Debug, Clone)]
pub struct QueryAggregator {
    pub lstm: LstmWeights,
    pub scorer: Scorer,
    pub input_dim: usize,
    pub query_hidden: usize,
}

impl QueryAggregator {
    pub fn new(
        params: &mut ParameterSet,
        cfg: &RankConfig,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lstm = LstmWeights::new(params, "rank.query", input_dim, cfg.query_hidden, rng)?;
        let concat = cfg.query_hidden + input_dim;
        let scorer = match cfg.scorer {
            ScorerKind::Mlp => Scorer::Mlp {
                hidden: Linear::new(
                    params,
                    "rank.scorer.hidden",
                    concat,
                    cfg.scorer_hidden,
                    true,
                    rng,
                )?,
                out: Linear::new(params, "rank.scorer.out", cfg.scorer_hidden, 1, true, rng)?,
            },
            ScorerKind::Linear => {
                Scorer::Linear(Linear::new(params, "rank.scorer", concat, 1, true, rng)?)
            }
        };
        Ok(Self {
            lstm,
            scorer,
            input_dim,
            query_hidden: cfg.query_hidden,
        })
    }

    /// Last hidden state of the query LSTM over the rows of `window`.
    pub fn query(&self, g: &mut Graph, window: Var) -> Result<Var> {
        let init = LstmState::zeros(g, self.query_hidden);
        let (_, last) = lstm_forward_matrix(g, window, init, &self.lstm)?;
        Ok(last.h)
    }

    /// Scores every row of `candidates` (`n x d`) against `query` (`1 x h`);
    /// returns an `n x 1` column.
    pub fn score(&self, g: &mut Graph, query: Var, candidates: Var) -> Result<Var> {
        let (qv, cv) = (g.value(query), g.value(candidates));
        if qv.rows() != 1 || qv.cols() != self.query_hidden || cv.cols() != self.input_dim {
            return Err(Error::shape(
                "rank_score",
                format!(
                    "query {}x{} / candidates {}x{} vs aggregator ({}, {})",
                    qv.rows(),
                    qv.cols(),
                    cv.rows(),
                    cv.cols(),
                    self.query_hidden,
                    self.input_dim
                ),
            ));
        }
        let n = cv.rows();
        let q = g.repeat_rows(query, n);
        let x = g.concat_cols(&[q, candidates]);
        Ok(match &self.scorer {
            Scorer::Mlp { hidden, out } => {
                let h = hidden.forward(g, x);
                let h = g.tanh(h);
                out.forward(g, h)
            }
            Scorer::Linear(l) => l.forward(g, x),
        })
    }
}

/// `f_r(q, u)` for a single query/candidate pair.
pub fn rank_score(g: &mut Graph, query: Var, candidate: Var, agg: &QueryAggregator) -> Result<Var> {
    agg.score(g, query, candidate)
}

#[derive(Debug, Clone)]
pub struct RankingInstance {
    /// 1-based position `i` of the last utterance in the query.
    pub query_index: usize,
    pub query: Var,
    /// Rows `u_{i+1} .. u_M`, in order.
    pub candidates: Var,
    pub num_candidates: usize,
}

impl RankingInstance {
    /// `{1, 0, ..., 0}`: the consecutive utterance is the only relevant one.
    pub fn labels(&self) -> Vec<u8> {
        let mut l = vec![0; self.num_candidates];
        l[0] = 1;
        l
    }
}

fn history_len(g: &Graph, u: Var) -> usize {
    g.value(u).rows()
}

/// Sliding-window queries of width `k`: one instance for each
/// `i in [k, M - 1]`, none when `M <= k`.
pub fn build_local_queries(
    g: &mut Graph,
    u: Var,
    k: usize,
    agg: &QueryAggregator,
) -> Result<Vec<RankingInstance>> {
    if k < 1 {
        return Err(Error::Config("local ranking window k must be >= 1".into()));
    }
    let m = history_len(g, u);
    let mut out = Vec::with_capacity(m.saturating_sub(k));
    for i in k..m {
        let window = g.slice_rows(u, i - k, k);
        let query = agg.query(g, window)?;
        let candidates = g.slice_rows(u, i, m - i);
        out.push(RankingInstance {
            query_index: i,
            query,
            candidates,
            num_candidates: m - i,
        });
    }
    Ok(out)
}

/// Prefix queries: one instance for each `i in [1, M - 1]`. The query LSTM
/// runs once over `u_1 .. u_{M-1}`; its step-`i` output is `q_i`.
pub fn build_global_queries(
    g: &mut Graph,
    u: Var,
    agg: &QueryAggregator,
) -> Result<Vec<RankingInstance>> {
    let m = history_len(g, u);
    if m < 2 {
        return Ok(Vec::new());
    }
    let prefix = g.slice_rows(u, 0, m - 1);
    let init = LstmState::zeros(g, agg.query_hidden);
    let (states, _) = lstm_forward_matrix(g, prefix, init, &agg.lstm)?;
    let mut out = Vec::with_capacity(m - 1);
    for i in 1..m {
        let query = g.row(states, i - 1);
        let candidates = g.slice_rows(u, i, m - i);
        out.push(RankingInstance {
            query_index: i,
            query,
            candidates,
            num_candidates: m - i,
        });
    }
    Ok(out)
}

/// Top1-ListMLE on plain scores; the relevant candidate is at index 0.
pub fn top1_listmle(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("top1_listmle needs at least one candidate"));
    }
    if scores.len() == 1 {
        return Ok(0.0);
    }
    Ok(-log_softmax(scores)?[0])
}

/// Top1-ListMLE on an `n x 1` (or `1 x n`) score node.
pub fn top1_listmle_var(g: &mut Graph, scores: Var) -> Var {
    let row = if g.value(scores).cols() == 1 && g.value(scores).rows() > 1 {
        g.transpose(scores)
    } else {
        scores
    };
    let lp = g.log_softmax_rows(row);
    let first = g.pick(lp, &[(0, 0)]);
    g.scale(first, -1.0)
}

/// Mean Top1-ListMLE over `instances`; a zero constant when there are none.
pub fn mean_instance_loss(
    g: &mut Graph,
    instances: &[RankingInstance],
    agg: &QueryAggregator,
) -> Result<Var> {
    if instances.is_empty() {
        return Ok(g.leaf(Tensor::scalar(0.0)));
    }
    let mut losses = Vec::with_capacity(instances.len());
    for inst in instances {
        let s = agg.score(g, inst.query, inst.candidates)?;
        losses.push(top1_listmle_var(g, s));
    }
    let all = g.concat_rows(&losses);
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / instances.len() as f64))
}

/// Mean over the `M - k` local instances; 0 when `M <= k`.
pub fn local_rank_loss(g: &mut Graph, u: Var, k: usize, agg: &QueryAggregator) -> Result<Var> {
    let inst = build_local_queries(g, u, k, agg)?;
    mean_instance_loss(g, &inst, agg)
}

/// Mean over the `M - 1` global instances; 0 when `M < 2`.
pub fn global_rank_loss(g: &mut Graph, u: Var, agg: &QueryAggregator) -> Result<Var> {
    let inst = build_global_queries(g, u, agg)?;
    mean_instance_loss(g, &inst, agg)
}

/// True when the relevant candidate (index 0) has the highest score; ties
/// resolve to the lowest index, so index 0 wins any tie it is part of.
pub fn ranked_first(scores: &[f64]) -> bool {
    scores.iter().all(|&s| s <= scores[0])
}

/// Fraction of instances whose relevant candidate is ranked first.
pub fn rank_accuracy(
    g: &mut Graph,
    instances: &[RankingInstance],
    agg: &QueryAggregator,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Empty("rank_accuracy needs at least one instance"));
    }
    let mut hits = 0usize;
    for inst in instances {
        let s = agg.score(g, inst.query, inst.candidates)?;
        if ranked_first(g.value(s).values()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}
