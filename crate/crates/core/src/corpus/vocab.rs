use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Separator placed between instruction sentences in decoder targets.
pub const SEP: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Splitting rules shared by corpus loading, vocabulary lookup and metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

/// Splits on whitespace and peels ASCII punctuation into separate tokens.
/// Hyphens and apostrophes between letters stay inside the word.
pub fn split_words(text: &str, cfg: TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = if cfg.lowercase { raw.to_lowercase() } else { raw.to_string() };
        let chars: Vec<char> = word.chars().collect();
        let mut cur = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            let joiner = (ch == '-' || ch == '\'')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if ch.is_ascii_punctuation() && !joiner {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token/id mapping with five reserved ids (`PAD`, `BOS`, `EOS`, `UNK`,
/// `SEP`, in that order from 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    pub tokenizer: TokenizerConfig,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first
    /// (ties alphabetical).
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>, min_count: usize, tokenizer: TokenizerConfig) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()), tokenizer)
    }

    /// Reserved entries followed by `tokens` in the given order; duplicates
    /// and reserved strings are skipped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, tokenizer: TokenizerConfig) -> Self {
        let mut vocab = Self { tokens: RESERVED.iter().map(|s| s.to_string()).collect(), tokenizer, index: HashMap::new() };
        vocab.reindex();
        for t in tokens {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len());
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(&split_words(text, vocab.tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        split_words(s, TokenizerConfig::default())
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(words("Stir well, then SERVE."), ["stir", "well", ",", "then", "serve", "."]);
        assert_eq!(words("  "), Vec::<String>::new());
        assert_eq!(words("stir-fry the cook's (hot) pan"), ["stir-fry", "the", "cook's", "(", "hot", ")", "pan"]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["mix".to_string()], TokenizerConfig::default());
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.token(SEP), "<sep>");
        assert_eq!(v.id("mix"), 5);
    }

    #[test]
    fn build_applies_cutoff_and_orders_by_frequency() {
        let seqs: Vec<Vec<String>> = vec![words("a b b c c c"), words("c b d")];
        let v = Vocabulary::build(seqs.iter().map(|s| s.as_slice()), 2, TokenizerConfig::default());
        assert_eq!(&v.tokens()[5..], ["c", "b"]);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn empty_text_is_empty() {
        let v = Vocabulary::from_tokens([], TokenizerConfig::default());
        assert!(tokenize("", &v).is_empty());
    }
}
