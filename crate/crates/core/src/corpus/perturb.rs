use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};

/// History perturbations used for order-sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    WordShuffle,
    WordReverse,
    UtteranceShuffle,
    UtteranceReverse,
    UtteranceDrop,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::WordShuffle,
        PerturbKind::WordReverse,
        PerturbKind::UtteranceShuffle,
        PerturbKind::UtteranceReverse,
        PerturbKind::UtteranceDrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::WordShuffle => "word_shuffle",
            PerturbKind::WordReverse => "word_reverse",
            PerturbKind::UtteranceShuffle => "utterance_shuffle",
            PerturbKind::UtteranceReverse => "utterance_reverse",
            PerturbKind::UtteranceDrop => "utterance_drop",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation `{s}`")))
    }
}

pub fn perturb_history(
    history: &[Utterance],
    kind: PerturbKind,
    seed: u64,
) -> Result<Vec<Utterance>> {
    perturb_history_with(history, kind, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn perturb_history_with(
    history: &[Utterance],
    kind: PerturbKind,
    rng: &mut impl Rng,
) -> Result<Vec<Utterance>> {
    if history.is_empty() {
        return Err(Error::Empty("cannot perturb an empty history"));
    }
    let mut out = history.to_vec();
    match kind {
        PerturbKind::WordShuffle => {
            for u in &mut out {
                u.tokens.shuffle(rng);
            }
        }
        PerturbKind::WordReverse => {
            for u in &mut out {
                u.tokens.reverse();
            }
        }
        PerturbKind::UtteranceShuffle => out.shuffle(rng),
        PerturbKind::UtteranceReverse => out.reverse(),
        PerturbKind::UtteranceDrop => {
            if out.len() > 1 {
                let i = rng.gen_range(0..out.len());
                out.remove(i);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(tokens: &[u32]) -> Utterance {
        Utterance::from_tokens(tokens.to_vec())
    }

    #[test]
    fn utterance_reverse() {
        let h = vec![utt(&[4]), utt(&[5]), utt(&[6])];
        let p = perturb_history(&h, PerturbKind::UtteranceReverse, 0).unwrap();
        assert_eq!(p, vec![utt(&[6]), utt(&[5]), utt(&[4])]);
    }

    #[test]
    fn word_reverse_on_single_tokens_is_identity() {
        let h = vec![utt(&[4]), utt(&[9])];
        assert_eq!(perturb_history(&h, PerturbKind::WordReverse, 3).unwrap(), h);
    }

    #[test]
    fn shuffle_is_reproducible() {
        let h: Vec<_> = (0..5).map(|i| utt(&[4 + i])).collect();
        let a = perturb_history(&h, PerturbKind::UtteranceShuffle, 11).unwrap();
        let b = perturb_history(&h, PerturbKind::UtteranceShuffle, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drop_is_noop_for_single_utterance() {
        let h = vec![utt(&[4, 5])];
        assert_eq!(
            perturb_history(&h, PerturbKind::UtteranceDrop, 1).unwrap(),
            h
        );
        assert!(perturb_history(&[], PerturbKind::UtteranceDrop, 1).is_err());
    }

    #[test]
    fn kind_names_parse() {
        for k in PerturbKind::ALL {
            assert_eq!(k.name().parse::<PerturbKind>().unwrap(), k);
        }
    }

    fn history_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
        prop::collection::vec(prop::collection::vec(4u32..40, 1..6), 1..7)
    }

    proptest! {
        #[test]
        fn token_multiset_preserved(h in history_strategy(), seed in any::<u64>(), k in 0usize..4) {
            let kind = PerturbKind::ALL[k];
            let hist: Vec<_> = h.iter().map(|t| utt(t)).collect();
            let p = perturb_history(&hist, kind, seed).unwrap();
            let mut a: Vec<u32> = hist.iter().flat_map(|u| u.tokens.clone()).collect();
            let mut b: Vec<u32> = p.iter().flat_map(|u| u.tokens.clone()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(p.len(), hist.len());
        }

        #[test]
        fn drop_keeps_the_rest_verbatim(h in history_strategy(), seed in any::<u64>()) {
            let hist: Vec<_> = h.iter().map(|t| utt(t)).collect();
            let p = perturb_history(&hist, PerturbKind::UtteranceDrop, seed).unwrap();
            if hist.len() == 1 {
                prop_assert_eq!(&p, &hist);
            } else {
                prop_assert_eq!(p.len(), hist.len() - 1);
                // p must be hist with exactly one element removed
                let ok = (0..hist.len()).any(|i| {
                    let mut q = hist.clone();
                    q.remove(i);
                    q == p
                });
                prop_assert!(ok);
            }
        }
    }
}
