//! Deterministic "ordered" dialogues for sanity experiments: every
//! utterance is its predecessor with each letter advanced by one, cycling
//! `z -> a`. The 26 letters plus the reserved tokens give a 30-entry
//! vocabulary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RawDialogue, Vocab};
use crate::error::{Error, Result};

pub const LETTERS: usize = 26;

fn letter(i: usize) -> String {
    char::from(b'a' + (i % LETTERS) as u8).to_string()
}

/// Dialogues of `turns` utterances; openings have `min_len..=max_len` random
/// letters.
pub fn ordered_dialogues(
    count: usize,
    turns: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<RawDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|d| {
            let len = rng.gen_range(min_len.max(1)..=max_len.max(min_len.max(1)));
            let mut cur: Vec<usize> = (0..len).map(|_| rng.gen_range(0..LETTERS)).collect();
            let mut utterances = Vec::with_capacity(turns);
            for _ in 0..turns {
                utterances.push(cur.iter().map(|&c| letter(c)).collect::<Vec<_>>().join(" "));
                cur.iter_mut().for_each(|c| *c = (*c + 1) % LETTERS);
            }
            RawDialogue {
                id: format!("d{d}"),
                utterances,
            }
        })
        .collect()
}

/// Reserved tokens followed by `a..z`.
pub fn ordered_vocab() -> Vocab {
    Vocab::from_tokens((0..LETTERS).map(letter))
}

/// Writes dialogues in the `{"dialog": [...]}` JSONL format.
pub fn write_jsonl(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for d in dialogues {
        let line = serde_json::json!({ "dialog": d.utterances });
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
