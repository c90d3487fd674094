mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use red_core::config::{RankConfig, ScorerKind};
use red_core::ranking::{
    build_global_queries, build_local_queries, global_rank_loss, local_rank_loss, rank_accuracy,
    rank_score, top1_listmle, top1_listmle_var, QueryAggregator, Scorer,
};
use red_core::substrate::{Graph, ParameterSet, Tensor};

fn aggregator(
    scorer: ScorerKind,
    d: usize,
    hidden: usize,
    seed: u64,
) -> (ParameterSet, QueryAggregator) {
    let mut params = ParameterSet::new();
    let cfg = RankConfig {
        scorer,
        query_hidden: hidden,
        scorer_hidden: 5,
        ..RankConfig::default()
    };
    let agg =
        QueryAggregator::new(&mut params, &cfg, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (params, agg)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
}

/// Rebuilds every window from scratch and scores each candidate on its own.
fn brute_force(
    params: &ParameterSet,
    agg: &QueryAggregator,
    u: &Tensor,
    window: Option<usize>,
) -> f64 {
    let m = u.rows();
    let rows = u.to_rows();
    let first = window.unwrap_or(1);
    let mut losses = Vec::new();
    for i in first..m {
        let mut g = Graph::new(params);
        let lo = window.map_or(0, |k| i - k);
        let w = g.leaf(Tensor::from_rows(&rows[lo..i]));
        let q = agg.query(&mut g, w).unwrap();
        let scores: Vec<f64> = rows[i..]
            .iter()
            .map(|c| {
                let cv = g.leaf(Tensor::row(c.clone()));
                let s = rank_score(&mut g, q, cv, agg).unwrap();
                g.scalar(s)
            })
            .collect();
        losses.push(top1_listmle(&scores).unwrap());
    }
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

#[test]
fn losses_match_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for scorer in [ScorerKind::Mlp, ScorerKind::Linear] {
        let (params, agg) = aggregator(scorer, 3, 4, 7);
        for m in 1..=7 {
            let u = random_matrix(m, 3, &mut rng);
            let mut g = Graph::new(&params);
            let uv = g.leaf(u.clone());
            for k in 1..=3 {
                let l = local_rank_loss(&mut g, uv, k, &agg).unwrap();
                assert!(
                    (g.scalar(l) - brute_force(&params, &agg, &u, Some(k))).abs() < 1e-12,
                    "m={m} k={k}"
                );
            }
            let l = global_rank_loss(&mut g, uv, &agg).unwrap();
            assert!(
                (g.scalar(l) - brute_force(&params, &agg, &u, None)).abs() < 1e-12,
                "m={m}"
            );
        }
    }
}

#[test]
fn instance_counts_and_candidate_rows() {
    let (params, agg) = aggregator(ScorerKind::Mlp, 2, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in 1..=40 {
        let u = random_matrix(m, 2, &mut rng);
        let rows = u.to_rows();
        let mut g = Graph::new(&params);
        let uv = g.leaf(u);
        for k in 1..=3 {
            let inst = build_local_queries(&mut g, uv, k, &agg).unwrap();
            assert_eq!(inst.len(), m.saturating_sub(k));
            for x in &inst {
                assert_eq!(
                    g.value(x.candidates).to_rows(),
                    rows[x.query_index..].to_vec()
                );
                assert_eq!(x.labels().iter().filter(|&&l| l == 1).count(), 1);
            }
        }
        let inst = build_global_queries(&mut g, uv, &agg).unwrap();
        assert_eq!(inst.len(), m.saturating_sub(1));
        for (n, x) in inst.iter().enumerate() {
            assert_eq!(x.query_index, n + 1);
            assert_eq!(x.num_candidates, m - x.query_index);
            assert_eq!(
                g.value(x.candidates).to_rows(),
                rows[x.query_index..].to_vec()
            );
        }
    }
}

#[test]
fn linear_scorer_ones_on_ones_scores_four() {
    let (mut params, agg) = aggregator(ScorerKind::Linear, 2, 2, 0);
    let Scorer::Linear(l) = &agg.scorer else {
        unreachable!()
    };
    params.value_mut(l.w).values_mut().fill(1.0);
    params.value_mut(l.b.unwrap()).values_mut().fill(0.0);
    let mut g = Graph::new(&params);
    let q = g.leaf(Tensor::row(vec![1.0, 1.0]));
    let u = g.leaf(Tensor::row(vec![1.0, 1.0]));
    let s = rank_score(&mut g, q, u, &agg).unwrap();
    assert_eq!(g.scalar(s), 4.0);
}

#[test]
fn zero_scorer_scores_zero() {
    let (mut params, agg) = aggregator(ScorerKind::Mlp, 2, 2, 0);
    for id in params.ids().collect::<Vec<_>>() {
        if params.get(id).name.starts_with("rank.scorer") {
            params.value_mut(id).values_mut().fill(0.0);
        }
    }
    let mut g = Graph::new(&params);
    let q = g.leaf(Tensor::row(vec![0.3, -2.0]));
    let u = g.leaf(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = agg.score(&mut g, q, u).unwrap();
    assert!(g.value(s).values().iter().all(|&v| v == 0.0));
}

#[test]
fn random_scorer_accuracy_matches_expectation() {
    // Instances with n candidates hit with probability 1/n under a random
    // scorer; average over many independently initialised aggregators.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut hits, mut expected, mut trials) = (0.0, 0.0, 0usize);
    for seed in 0..150 {
        let (params, agg) = aggregator(ScorerKind::Mlp, 3, 3, 1000 + seed);
        let m = rng.gen_range(2..7);
        let mut g = Graph::new(&params);
        let u = g.leaf(random_matrix(m, 3, &mut rng));
        let inst = build_global_queries(&mut g, u, &agg).unwrap();
        hits += rank_accuracy(&mut g, &inst, &agg).unwrap() * inst.len() as f64;
        expected += inst
            .iter()
            .map(|i| 1.0 / i.num_candidates as f64)
            .sum::<f64>();
        trials += inst.len();
    }
    let (acc, exp) = (hits / trials as f64, expected / trials as f64);
    assert!(
        (acc - exp).abs() < 0.05,
        "accuracy {acc} vs expectation {exp}"
    );
}

#[test]
fn singleton_and_ordered_accuracy() {
    let (params, agg) = aggregator(ScorerKind::Mlp, 2, 2, 0);
    let mut g = Graph::new(&params);
    let u = g.leaf(Tensor::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]));
    let inst = build_local_queries(&mut g, u, 1, &agg).unwrap();
    assert_eq!(inst.len(), 1);
    assert_eq!(rank_accuracy(&mut g, &inst, &agg).unwrap(), 1.0);
}

fn grad_of_listmle(scores: &[f64]) -> Vec<f64> {
    let params = ParameterSet::new();
    let mut g = Graph::new(&params);
    let s = g.leaf(Tensor::row(scores.to_vec()));
    let loss = top1_listmle_var(&mut g, s);
    let (_, nodes) = g.backward_all(loss);
    nodes.get(s).unwrap().values().to_vec()
}

proptest! {
    #[test]
    fn shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        prop_assert!((top1_listmle(&scores).unwrap() - top1_listmle(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negatives_permutation_invariant(scores in prop::collection::vec(-20.0f64..20.0, 2..12), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut p = scores.clone();
        p[1..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((top1_listmle(&scores).unwrap() - top1_listmle(&p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn monotone(scores in prop::collection::vec(-10.0f64..10.0, 2..10), j in 1usize..10, d in 0.01f64..3.0) {
        let j = 1 + j % (scores.len() - 1);
        let base = top1_listmle(&scores).unwrap();
        let mut up = scores.clone();
        up[0] += d;
        prop_assert!(top1_listmle(&up).unwrap() < base);
        let mut neg = scores.clone();
        neg[j] += d;
        prop_assert!(top1_listmle(&neg).unwrap() > base);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot(scores in prop::collection::vec(-15.0f64..15.0, 1..16)) {
        let grad = grad_of_listmle(&scores);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (i, (g, s)) in grad.iter().zip(&scores).enumerate() {
            let expected = (s - max).exp() / z - if i == 0 { 1.0 } else { 0.0 };
            prop_assert!((g - expected).abs() < 1e-10);
        }
    }
}
