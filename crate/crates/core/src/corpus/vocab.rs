use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RawDialogue;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id mapping. Ids 0..=3 are PAD, UNK, BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens.into_iter().skip(RESERVED.len()))
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.id_to_token,
        }
    }
}

impl Vocab {
    /// Reserved entries followed by `tokens` in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for t in tokens {
            let t = t.into();
            if !token_to_id.contains_key(&t) {
                token_to_id.insert(t.clone(), id_to_token.len() as u32);
                id_to_token.push(t);
            }
        }
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Word frequencies over every utterance, using the tokenizer's splitting.
pub fn count_words(dialogues: &[RawDialogue]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for d in dialogues {
        for u in &d.utterances {
            for w in super::pre_tokenize(u) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Most-frequent-first vocabulary, ties broken lexicographically. Words
/// seen fewer than `min_count` times are left out (they map to UNK).
pub fn build_vocab(dialogues: &[RawDialogue], min_count: usize, max_size: usize) -> Result<Vocab> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be >= 1".into()));
    }
    if dialogues.iter().all(|d| d.utterances.is_empty()) {
        return Err(Error::Empty(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut entries: Vec<(String, usize)> = count_words(dialogues)
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(max_size);
    Ok(Vocab::from_tokens(entries.into_iter().map(|(w, _)| w)))
}
