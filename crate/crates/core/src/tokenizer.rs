//! Word-level vocabulary with BERT-style special tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Splits text into lowercase alphanumeric runs and single punctuation
/// characters. The literal markers `[SEP]` and `[CLS]` survive as tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("[SEP]") || rest.starts_with("[CLS]") {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(rest[..5].to_string());
            rest = &rest[5..];
            continue;
        }
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabRepr {
    id: String,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    id: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            id: r.id,
            tokens: r.tokens,
            index,
        }
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        Self {
            id: v.id,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from `texts`, keeping words seen at least
    /// `min_count` times, ordered by descending frequency then lexically.
    pub fn build<'a>(id: &str, texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                if !SPECIALS.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        VocabRepr {
            id: id.to_string(),
            tokens,
        }
        .into()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Token ids without any special prefix.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.lookup(w)).collect()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        split_words(text).len()
    }

    /// `[CLS]` followed by the text tokens, truncated to `max_tokens` total.
    pub fn encode_with_cls(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_tokens.min(64));
        ids.push(CLS);
        ids.extend(self.encode(text).into_iter().take(max_tokens.saturating_sub(1)));
        ids
    }
}
