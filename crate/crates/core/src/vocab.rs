use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace and ASCII punctuation; punctuation
/// marks are kept as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Canonical single-spaced, lowercased form of a text.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

/// Dense token ids; specials first, then all other tokens in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::index(tokens)
    }

    /// Restores a vocabulary from its token list (id order).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return contract("vocabulary must start with <pad> <bos> <eos> <unk>");
        }
        let v = Self::index(tokens);
        if v.index.len() != v.tokens.len() {
            return contract("vocabulary tokens must be unique");
        }
        Ok(v)
    }

    fn index(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    /// Token ids of `text`, without BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// `BOS text EOS`, truncated so the whole sequence fits `max_len`.
    pub fn encode_target(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(self.encode(text).into_iter().take(max_len.saturating_sub(2)));
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, dropping PAD/BOS/EOS and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, DiseaseCatalog, GeneratorConfig};

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("No pneumothorax."), ["no", "pneumothorax", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Clue: severe  Edema"), ["clue", ":", "severe", "edema"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(["no pneumothorax ."]);
        assert_eq!(v.encode("No pneumothorax."), [v.id("no"), v.id("pneumothorax"), v.id(".")]);
        assert_eq!(v.encode("zebra"), [UNK]);
        assert_eq!(v.token(PAD), "<pad>");
    }

    #[test]
    fn corpus_round_trip() {
        let cat = DiseaseCatalog::new();
        let lex = cat.lexicon();
        let vocab = Vocabulary::build(lex.iter().map(String::as_str));
        for s in generate_corpus(200, 4, &GeneratorConfig::default()) {
            assert_eq!(detokenize(&tokenize(&s.report)), normalize(&s.report));
            assert_eq!(normalize(&s.report), s.report);
            assert_eq!(vocab.decode(&vocab.encode(&s.report)), s.report);
            assert!(!vocab.encode(&s.report).contains(&UNK));
        }
    }

    #[test]
    fn vocabulary_is_stable() {
        let reports: Vec<String> = generate_corpus(50, 1, &GeneratorConfig::default())
            .into_iter()
            .map(|s| s.report)
            .collect();
        let a = Vocabulary::build(reports.iter().map(String::as_str));
        let b = Vocabulary::build(reports.iter().map(String::as_str));
        assert_eq!(a, b);
        assert_eq!(Vocabulary::from_tokens(a.tokens().to_vec()).unwrap(), a);
        assert!(Vocabulary::from_tokens(alloc::vec!["x".into()]).is_err());
    }

    #[test]
    fn target_framing() {
        let v = Vocabulary::build(["a b c"]);
        let t = v.encode_target("a b c", 4);
        assert_eq!(t, [BOS, v.id("a"), v.id("b"), EOS]);
        assert_eq!(v.decode(&t), "a b");
    }
}
