//! Metrics and diagnostics: perplexity, distinct-n, history-length
//! breakdowns, perturbation sensitivity, ranking probes and utterance
//! embedding export.
//!
//! Perplexity is the corpus-level `exp(sum NLL / sum tokens)` over gold
//! response tokens, EOS included.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::RankMode;
use crate::corpus::{perturb_history, HistoryResponsePair, PerturbKind};
use crate::decoder::GenerationOutput;
use crate::error::{Error, Result};
use crate::model::RedModel;
use crate::par::{map_ordered, Execution};
use crate::ranking::{self, RankingInstance};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::substrate::{Graph, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplStats {
    pub nll: f64,
    pub tokens: usize,
    pub ppl: f64,
}

impl PplStats {
    fn from_parts(parts: impl IntoIterator<Item = (f64, usize)>) -> Result<Self> {
        let (mut nll, mut tokens) = (0.0, 0);
        for (n, t) in parts {
            nll += n;
            tokens += t;
        }
        if tokens == 0 {
            return Err(Error::Empty("perplexity over zero tokens"));
        }
        Ok(Self {
            nll,
            tokens,
            ppl: (nll / tokens as f64).exp(),
        })
    }
}

/// Per-pair `(summed NLL, token count)`, in input order.
pub fn pair_nlls(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    exec: Execution,
) -> Result<Vec<(f64, usize)>> {
    map_ordered(pairs, exec, |_, p| model.nll(params, p))
        .into_iter()
        .collect()
}

pub fn perplexity_stats(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    exec: Execution,
) -> Result<PplStats> {
    if pairs.is_empty() {
        return Err(Error::Empty("perplexity needs at least one pair"));
    }
    PplStats::from_parts(pair_nlls(model, params, pairs, exec)?)
}

pub fn perplexity(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    exec: Execution,
) -> Result<f64> {
    Ok(perplexity_stats(model, params, pairs, exec)?.ppl)
}

/// Unique n-grams across all responses over the total number of tokens.
pub fn distinct_n(responses: &[Vec<u32>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("distinct_n needs n >= 1".into()));
    }
    let total: usize = responses.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("distinct_n over responses with no tokens"));
    }
    let unique: HashSet<&[u32]> = responses.iter().flat_map(|r| r.windows(n)).collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Inclusive range of history lengths (in utterances).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub min: usize,
    /// `None` for an open upper end.
    pub max: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, m: usize) -> bool {
        m >= self.min && self.max.is_none_or(|x| m <= x)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(max) if max == self.min => write!(f, "{}", self.min),
            Some(max) => write!(f, "{}-{}", self.min, max),
            None => write!(f, "{}+", self.min),
        }
    }
}

/// Disjoint, ordered buckets covering every history length `>= 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets(Vec<Bucket>);

impl Buckets {
    pub fn new(buckets: Vec<Bucket>) -> Result<Self> {
        let bad = |m: &str| Err(Error::Config(format!("history buckets: {m}")));
        if buckets.is_empty() {
            return bad("need at least one bucket");
        }
        if buckets[0].min > 1 {
            return bad("first bucket must start at 1");
        }
        for w in buckets.windows(2) {
            match w[0].max {
                Some(max) if w[1].min == max + 1 => {}
                _ => return bad("buckets must be contiguous and non-overlapping"),
            }
        }
        if buckets.iter().any(|b| b.max.is_some_and(|x| x < b.min)) {
            return bad("bucket upper end below its lower end");
        }
        if buckets.last().unwrap().max.is_some() {
            return bad("last bucket must be open-ended");
        }
        Ok(Self(buckets))
    }

    pub fn as_slice(&self) -> &[Bucket] {
        &self.0
    }

    pub fn index_of(&self, m: usize) -> usize {
        self.0.iter().position(|b| b.contains(m)).unwrap_or(0)
    }
}

impl Default for Buckets {
    /// Fewer than 11, 11 to 15, more than 15 utterances.
    fn default() -> Self {
        Self(vec![
            Bucket {
                min: 1,
                max: Some(10),
            },
            Bucket {
                min: 11,
                max: Some(15),
            },
            Bucket { min: 16, max: None },
        ])
    }
}

impl FromStr for Buckets {
    type Err = Error;

    /// Upper bounds of the closed buckets, e.g. `"10,15"` for the default.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        let mut min = 1;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let max: usize = part
                .parse()
                .map_err(|_| Error::Config(format!("bad bucket bound `{part}`")))?;
            out.push(Bucket {
                min,
                max: Some(max),
            });
            min = max + 1;
        }
        out.push(Bucket { min, max: None });
        Self::new(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: String,
    pub count: usize,
    pub tokens: usize,
    /// Omitted for empty buckets.
    pub ppl: Option<f64>,
    /// Against a reference report, when one is given.
    pub delta_ppl: Option<f64>,
}

/// Token-weighted PPL per history-length bucket.
pub fn ppl_by_history_length(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    buckets: &Buckets,
    exec: Execution,
) -> Result<Vec<BucketReport>> {
    let nlls = pair_nlls(model, params, pairs, exec)?;
    bucket_report(pairs, &nlls, buckets)
}

/// Groups precomputed per-pair NLLs by history length.
pub fn bucket_report(
    pairs: &[HistoryResponsePair],
    nlls: &[(f64, usize)],
    buckets: &Buckets,
) -> Result<Vec<BucketReport>> {
    let mut groups: Vec<Vec<(f64, usize)>> = vec![Vec::new(); buckets.as_slice().len()];
    for (p, &n) in pairs.iter().zip(nlls) {
        groups[buckets.index_of(p.history.len())].push(n);
    }
    buckets
        .as_slice()
        .iter()
        .zip(groups)
        .map(|(b, grp)| {
            let count = grp.len();
            let stats = if count == 0 {
                None
            } else {
                Some(PplStats::from_parts(grp)?)
            };
            Ok(BucketReport {
                bucket: b.to_string(),
                count,
                tokens: stats.map_or(0, |s| s.tokens),
                ppl: stats.map(|s| s.ppl),
                delta_ppl: None,
            })
        })
        .collect()
}

/// Fills `delta_ppl = ppl - reference.ppl` bucket by bucket.
pub fn with_reference(report: &mut [BucketReport], reference: &[BucketReport]) -> Result<()> {
    if report.len() != reference.len() {
        return Err(Error::Data("bucket reports differ in length".into()));
    }
    for (r, base) in report.iter_mut().zip(reference) {
        r.delta_ppl = match (r.ppl, base.ppl) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub kind: PerturbKind,
    /// Mean over seeds.
    pub ppl: f64,
    pub delta_ppl: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTable {
    pub base_ppl: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<PerturbRow>,
}

impl PerturbationTable {
    pub fn row(&self, kind: PerturbKind) -> Option<&PerturbRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }
}

/// Seed for perturbing pair `index` under `kind` and `seed`.
pub fn perturb_seed(seed: u64, kind: PerturbKind, index: usize) -> u64 {
    let k = PerturbKind::ALL
        .iter()
        .position(|&x| x == kind)
        .unwrap_or(0) as u64;
    derive_seed(derive_seed(seed, k), index as u64)
}

/// PPL on perturbed histories (responses untouched) per kind, averaged
/// over `seeds`, with the change against the unperturbed PPL.
pub fn perturbation_report(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    kinds: &[PerturbKind],
    seeds: &[u64],
    exec: Execution,
) -> Result<PerturbationTable> {
    if seeds.is_empty() {
        return Err(Error::Empty("perturbation_report needs at least one seed"));
    }
    let base_ppl = perplexity(model, params, pairs, exec)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let parts = map_ordered(pairs, exec, |i, p| {
                let history = perturb_history(&p.history, kind, perturb_seed(seed, kind, i))?;
                let q = HistoryResponsePair {
                    history,
                    ..p.clone()
                };
                model.nll(params, &q)
            });
            let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
            per_seed.push(PplStats::from_parts(parts)?.ppl);
        }
        let ppl = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(PerturbRow {
            kind,
            ppl,
            delta_ppl: ppl - base_ppl,
            per_seed,
        });
    }
    Ok(PerturbationTable {
        base_ppl,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankProbe {
    /// Fraction of ranking instances with the consecutive utterance on top.
    pub accuracy: f64,
    /// Mean per-pair ranking loss.
    pub mean_loss: f64,
    pub instances: usize,
    pub pairs: usize,
}

/// Ranking diagnostics for a model with ranking enabled.
pub fn rank_probe(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    exec: Execution,
) -> Result<RankProbe> {
    let agg = model.aggregator.as_ref().ok_or_else(|| {
        Error::Config("rank-probe needs a model trained with rank.mode = local or global".into())
    })?;
    if pairs.is_empty() {
        return Err(Error::Empty("rank_probe needs at least one pair"));
    }
    let parts = map_ordered(pairs, exec, |_, p| -> Result<(usize, usize, f64)> {
        let mut g = Graph::new(params);
        let enc = model.encode(&mut g, p)?;
        let u = enc.utterance_reprs;
        let inst: Vec<RankingInstance> = match model.config.rank.mode {
            RankMode::Local => ranking::build_local_queries(&mut g, u, model.config.rank.k, agg)?,
            _ => ranking::build_global_queries(&mut g, u, agg)?,
        };
        let loss = ranking::mean_instance_loss(&mut g, &inst, agg)?;
        let mut hits = 0;
        for i in &inst {
            let s = agg.score(&mut g, i.query, i.candidates)?;
            hits += usize::from(ranking::ranked_first(g.value(s).values()));
        }
        Ok((hits, inst.len(), g.scalar(loss)))
    });
    let (mut hits, mut total, mut loss) = (0, 0, 0.0);
    for p in parts {
        let (h, n, l) = p?;
        hits += h;
        total += n;
        loss += l;
    }
    if total == 0 {
        return Err(Error::Empty(
            "no ranking instances (all histories too short)",
        ));
    }
    Ok(RankProbe {
        accuracy: hits as f64 / total as f64,
        mean_loss: loss / pairs.len() as f64,
        instances: total,
        pairs: pairs.len(),
    })
}

/// Greedy responses for every pair's history.
pub fn generate_responses(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    max_len: usize,
    exec: Execution,
) -> Result<Vec<GenerationOutput>> {
    map_ordered(pairs, exec, |_, p| {
        let mut g = Graph::new(params);
        let enc = model.encode(&mut g, p)?;
        model.decoder.generate_greedy(&mut g, &enc, max_len)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub tokens: usize,
    pub pairs: usize,
    pub dist1: f64,
    pub dist2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Vec<BucketReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationTable>,
}

/// PPL plus distinct-1/2 of greedy generations.
pub fn evaluate(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    exec: Execution,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation needs at least one pair"));
    }
    let stats = PplStats::from_parts(pair_nlls(model, params, pairs, exec)?)?;
    let gens = generate_responses(
        model,
        params,
        pairs,
        model.config.decoder.max_decode_len,
        exec,
    )?;
    let responses: Vec<Vec<u32>> = gens.into_iter().map(|o| o.token_ids).collect();
    let (dist1, dist2) = match (distinct_n(&responses, 1), distinct_n(&responses, 2)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => (0.0, 0.0),
    };
    Ok(EvalReport {
        ppl: stats.ppl,
        tokens: stats.tokens,
        pairs: pairs.len(),
        dist1,
        dist2,
        buckets: None,
        perturbation: None,
    })
}

/// Samples up to `sample_per_position` rows of `U` per history position
/// (1-based) and writes them as CSV. Returns the number of rows written.
pub fn dump_utterance_embeddings(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    sample_per_position: usize,
    seed: u64,
    path: &Path,
    exec: Execution,
) -> Result<usize> {
    let rows = sample_utterance_embeddings(model, params, pairs, sample_per_position, seed, exec)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    let dim = model.encoder.hidden_dim();
    let mut header = vec!["position_index".to_string()];
    header.extend((0..dim).map(|d| format!("d{d}")));
    w.write_record(&header)?;
    for (pos, v) in &rows {
        let mut rec = vec![pos.to_string()];
        rec.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

/// In-memory counterpart of [`dump_utterance_embeddings`].
pub fn sample_utterance_embeddings(
    model: &RedModel,
    params: &ParameterSet,
    pairs: &[HistoryResponsePair],
    sample_per_position: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if sample_per_position == 0 {
        return Err(Error::Config("sample_per_position must be >= 1".into()));
    }
    let reprs = map_ordered(pairs, exec, |_, p| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(params);
        let enc = model.encode(&mut g, p)?;
        Ok(g.value(enc.utterance_reprs).to_rows())
    });
    let mut by_pos: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for r in reprs {
        for (j, row) in r?.into_iter().enumerate() {
            by_pos.entry(j + 1).or_default().push(row);
        }
    }
    let mut rng = stream_rng(seed, Stream::Sampling);
    let mut out = Vec::new();
    for (pos, rows) in by_pos {
        let n = rows.len().min(sample_per_position);
        let mut picked = sample(&mut rng, rows.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (pos, rows[i].clone())));
    }
    Ok(out)
}

/// Reads a CSV written by [`dump_utterance_embeddings`].
pub fn read_embedding_csv(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_err = |m: String| Error::Data(format!("{}: {m}", path.display()));
        let pos = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_err("bad position_index".into()))?;
        let v = rec
            .iter()
            .skip(1)
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| parse_err(format!("bad value `{x}`")))
            })
            .collect::<Result<_>>()?;
        out.push((pos, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_fixture() {
        let r = vec![vec![4, 5], vec![4, 5]];
        assert_eq!(distinct_n(&r, 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&r, 2).unwrap(), 0.25);
        assert_eq!(distinct_n(&[vec![7]], 1).unwrap(), 1.0);
        assert_eq!(distinct_n(&vec![vec![9]; 5], 1).unwrap(), 0.2);
        assert!(distinct_n(&[vec![], vec![]], 1).is_err());
        assert!(distinct_n(&[vec![1]], 0).is_err());
    }

    #[test]
    fn bucket_parsing() {
        let b: Buckets = "10,15".parse().unwrap();
        assert_eq!(b, Buckets::default());
        assert_eq!(b.index_of(1), 0);
        assert_eq!(b.index_of(10), 0);
        assert_eq!(b.index_of(11), 1);
        assert_eq!(b.index_of(15), 1);
        assert_eq!(b.index_of(16), 2);
        assert_eq!(b.as_slice()[2].to_string(), "16+");
        assert!("5,3".parse::<Buckets>().is_err());
        assert_eq!("".parse::<Buckets>().unwrap().as_slice().len(), 1);
    }

    #[test]
    fn delta_against_reference() {
        let mk = |ppl| BucketReport {
            bucket: "1-10".into(),
            count: 1,
            tokens: 3,
            ppl,
            delta_ppl: None,
        };
        let mut a = vec![mk(Some(3.0)), mk(None)];
        with_reference(&mut a, &[mk(Some(2.5)), mk(Some(1.0))]).unwrap();
        assert_eq!(a[0].delta_ppl, Some(0.5));
        assert_eq!(a[1].delta_ppl, None);
    }
}
