//! Dialogue corpora: JSONL ingestion, vocabulary, tokenization, expansion
//! into history/response pairs, and history perturbations.

mod cache;
mod perturb;
pub mod synthetic;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{read_pair_cache, write_pair_cache, PAIR_CACHE_MAGIC, PAIR_CACHE_VERSION};
pub use perturb::{perturb_history, perturb_history_with, PerturbKind};
pub use vocab::{build_vocab, count_words, Vocab, BOS, EOS, PAD, RESERVED, UNK};

/// One speaker turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    /// Source text. Perturbations rearrange `tokens` only.
    pub raw: String,
}

impl Utterance {
    pub fn from_tokens(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            raw: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An untokenized dialogue as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDialogue {
    pub id: String,
    pub utterances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryResponsePair {
    pub history: Vec<Utterance>,
    pub response: Utterance,
    pub dialogue_id: String,
    /// Index of `response` within its source dialogue.
    pub turn_index: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub dialogues: Vec<RawDialogue>,
    /// Records with fewer than two utterances.
    pub dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub max_utterance_len: usize,
    pub max_response_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            max_utterance_len: 32,
            max_response_len: 32,
        }
    }
}

#[derive(Deserialize)]
struct Record {
    dialog: Vec<String>,
}

/// Reads a JSONL corpus where every line is `{"dialog": [utterance, ...]}`.
///
/// Dialogues get ids `d<record index>`. Records with fewer than two
/// utterances are dropped and counted; blank utterances are an error.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut dialogues = Vec::new();
    let mut dropped = 0;
    let mut records = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let id = format!("d{records}");
        records += 1;
        if let Some(j) = rec.dialog.iter().position(|u| u.trim().is_empty()) {
            return Err(parse_err(i + 1, format!("utterance {j} is blank")));
        }
        if rec.dialog.len() < 2 {
            dropped += 1;
            continue;
        }
        dialogues.push(RawDialogue {
            id,
            utterances: rec.dialog,
        });
    }
    if records == 0 {
        return Err(Error::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(LoadedCorpus { dialogues, dropped })
}

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Utterance> {
    let words = pre_tokenize(text);
    if words.is_empty() {
        return Err(Error::Data(format!("cannot tokenize blank text {text:?}")));
    }
    let tokens = words
        .iter()
        .take(max_len.max(1))
        .map(|w| vocab.id(w))
        .collect();
    Ok(Utterance {
        tokens,
        raw: text.to_string(),
    })
}

pub fn detokenize(tokens: &[u32], vocab: &Vocab) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokenize_dialogue(raw: &RawDialogue, vocab: &Vocab, max_len: usize) -> Result<Dialogue> {
    let utterances = raw
        .utterances
        .iter()
        .map(|u| tokenize(u, vocab, max_len))
        .collect::<Result<_>>()?;
    Ok(Dialogue {
        id: raw.id.clone(),
        utterances,
    })
}

/// All `T - 1` prefixes of a dialogue: pair `j` has history
/// `utterances[..j]` and response `utterances[j]`.
pub fn expand_pairs(d: &Dialogue) -> Vec<HistoryResponsePair> {
    (1..d.utterances.len())
        .map(|j| HistoryResponsePair {
            history: d.utterances[..j].to_vec(),
            response: d.utterances[j].clone(),
            dialogue_id: d.id.clone(),
            turn_index: j,
        })
        .collect()
}

/// Tokenizes, expands and truncates responses to `max_response_len`.
pub fn prepare_pairs(
    raw: &[RawDialogue],
    vocab: &Vocab,
    cfg: &CorpusConfig,
) -> Result<Vec<HistoryResponsePair>> {
    let mut pairs = Vec::new();
    for d in raw {
        let d = tokenize_dialogue(d, vocab, cfg.max_utterance_len)?;
        for mut p in expand_pairs(&d) {
            p.response.tokens.truncate(cfg.max_response_len.max(1));
            pairs.push(p);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    fn dialogue(n: usize) -> Dialogue {
        Dialogue {
            id: "x".into(),
            utterances: (0..n)
                .map(|i| Utterance::from_tokens(vec![4 + i as u32]))
                .collect(),
        }
    }

    #[test]
    fn loads_records_in_order_and_drops_short_ones() {
        let f = write(
            "{\"dialog\": [\"hi\", \"hello\"]}\n{\"dialog\": [\"alone\"]}\n\n{\"dialog\": [\"a\", \"b\", \"c\"]}\n",
        );
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.dropped, 1);
        assert_eq!(c.dialogues.len(), 2);
        assert_eq!(c.dialogues[0].id, "d0");
        assert_eq!(c.dialogues[1].id, "d2");
        assert_eq!(c.dialogues[0].utterances.len(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write("{\"dialog\": [\"a\", \"b\"]}\nnot json\n");
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_and_blank_utterance_fail() {
        assert!(load_corpus(write("").path()).is_err());
        assert!(load_corpus(write("{\"dialog\": [\"a\", \"  \"]}\n").path()).is_err());
    }

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        let v = Vocab::from_tokens(["hello", "!"]);
        let u = tokenize("Hello!", &v, 32).unwrap();
        assert_eq!(u.tokens, vec![4, 5]);
        assert_eq!(pre_tokenize("Hello!"), vec!["hello", "!"]);
        assert_eq!(tokenize("bye", &v, 32).unwrap().tokens, vec![UNK]);
        assert!(tokenize("  \t ", &v, 32).is_err());
        assert_eq!(pre_tokenize("Scotch goes good with meat").len(), 5);
    }

    #[test]
    fn tokenize_truncates() {
        let v = Vocab::from_tokens(["a"]);
        assert_eq!(tokenize("a a a a", &v, 2).unwrap().tokens.len(), 2);
    }

    #[test]
    fn expand_pairs_counts_and_prefixes() {
        assert_eq!(expand_pairs(&dialogue(2)).len(), 1);
        let pairs = expand_pairs(&dialogue(5));
        let lens: Vec<_> = pairs.iter().map(|p| p.history.len()).collect();
        assert_eq!(lens, vec![1, 2, 3, 4]);
        let d = dialogue(5);
        for p in &pairs {
            assert_eq!(p.history, d.utterances[..p.turn_index]);
            assert_eq!(p.response, d.utterances[p.turn_index]);
        }
        let total: usize = [4, 6, 8]
            .iter()
            .map(|&n| expand_pairs(&dialogue(n)).len())
            .sum();
        assert_eq!(total, 15);
    }
}
