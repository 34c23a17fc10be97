//! Word and character vocabularies with reserved padding/unknown ids.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token and character id tables. Ids are dense and deterministic for a
/// given corpus and min-count: after the two reserved slots, entries are
/// ordered by descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_ids: HashMap<String, u32>,
    chars: Vec<char>,
    char_ids: HashMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    chars: Vec<String>,
}

impl Vocab {
    /// Build from a token stream. Tokens with frequency below `min_count`
    /// map to UNK; the character table keeps every observed character.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count < 1 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut token_counts: HashMap<String, u64> = HashMap::new();
        let mut char_counts: HashMap<char, u64> = HashMap::new();
        for tok in corpus {
            let tok = tok.as_ref();
            *token_counts.entry(tok.to_string()).or_insert(0) += 1;
            for c in tok.chars() {
                *char_counts.entry(c).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = token_counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count as u64)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut chars: Vec<(char, u64)> = char_counts.into_iter().collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        let chars: Vec<char> = chars.into_iter().map(|(c, _)| c).collect();
        Ok(Vocab::from_tables(tokens, chars))
    }

    fn from_tables(tokens: Vec<String>, chars: Vec<char>) -> Vocab {
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let char_ids = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + 2))
            .collect();
        Vocab {
            tokens,
            token_ids,
            chars,
            char_ids,
        }
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.token_ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn char_id(&self, c: char) -> u32 {
        self.char_ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Token table size including the reserved ids.
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Character table size including the reserved ids.
    pub fn n_chars(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.token_ids.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over both tables; stored in checkpoints so evaluation can
    /// detect a vocabulary that differs from the one trained against.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0xff]);
        }
        h.update([0xfe]);
        for &c in &self.chars {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
            h.update([0xff]);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
            chars: self.chars.iter().map(|c| c.to_string()).collect(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Vocab> {
        let file: VocabFile =
            serde_json::from_str(s).map_err(|e| Error::data(format!("invalid vocab json: {e}")))?;
        if file.tokens.len() < 2 || file.tokens[0] != PAD_TOKEN || file.tokens[1] != UNK_TOKEN {
            return Err(Error::data("vocab json missing reserved pad/unk tokens"));
        }
        let mut chars = Vec::with_capacity(file.chars.len());
        for s in &file.chars {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(Error::data(format!("invalid char entry '{s}' in vocab"))),
            }
        }
        Ok(Vocab::from_tables(file.tokens, chars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_filters_tokens() {
        let v = Vocab::build(["a", "a", "b"], 2).unwrap();
        assert_eq!(v.n_tokens(), 3); // pad, unk, a
        assert_eq!(v.token_id("a"), 2);
        assert_eq!(v.token_id("b"), UNK_ID);
    }

    #[test]
    fn reserved_ids_always_present() {
        let v = Vocab::build(Vec::<String>::new(), 1).unwrap();
        assert_eq!(v.n_tokens(), 2);
        assert_eq!(v.token_id("<pad>"), PAD_ID);
        assert_eq!(v.token_id("<unk>"), UNK_ID);
    }

    #[test]
    fn identical_corpus_gives_identical_assignment() {
        let corpus = ["the", "cat", "the", "dog", "a"];
        let a = Vocab::build(corpus, 1).unwrap();
        let b = Vocab::build(corpus, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let v = Vocab::build(["b", "b", "c", "a"], 1).unwrap();
        assert_eq!(v.token_id("b"), 2);
        assert_eq!(v.token_id("a"), 3);
        assert_eq!(v.token_id("c"), 4);
    }

    #[test]
    fn chars_cover_rare_tokens_too() {
        let v = Vocab::build(["aa", "z"], 2).unwrap();
        assert_eq!(v.token_id("z"), UNK_ID);
        assert_ne!(v.char_id('z'), UNK_ID);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(["x", "y", "x"], 1).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.fingerprint(), back.fingerprint());
    }
}
