//! Padding and truncation limits per dataset preset.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingLimits {
    pub max_chars_per_word: usize,
    pub max_words_per_utterance: usize,
    pub max_utterances: usize,
    pub max_words_per_response: usize,
    pub max_words_per_entry: usize,
    pub max_entries: usize,
}

impl PaddingLimits {
    pub fn persona_chat() -> Self {
        PaddingLimits {
            max_chars_per_word: 18,
            max_words_per_utterance: 20,
            max_utterances: 15,
            max_words_per_response: 20,
            max_words_per_entry: 15,
            max_entries: 5,
        }
    }

    pub fn cmu_dog() -> Self {
        PaddingLimits {
            max_chars_per_word: 18,
            max_words_per_utterance: 40,
            max_utterances: 15,
            max_words_per_response: 40,
            max_words_per_entry: 40,
            max_entries: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("max_chars_per_word", self.max_chars_per_word),
            ("max_words_per_utterance", self.max_words_per_utterance),
            ("max_utterances", self.max_utterances),
            ("max_words_per_response", self.max_words_per_response),
            ("max_words_per_entry", self.max_words_per_entry),
            ("max_entries", self.max_entries),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_values() {
        let p = PaddingLimits::persona_chat();
        assert_eq!(
            (
                p.max_chars_per_word,
                p.max_words_per_utterance,
                p.max_utterances,
                p.max_words_per_response,
                p.max_words_per_entry,
                p.max_entries
            ),
            (18, 20, 15, 20, 15, 5)
        );
        let c = PaddingLimits::cmu_dog();
        assert_eq!(
            (
                c.max_chars_per_word,
                c.max_words_per_utterance,
                c.max_utterances,
                c.max_words_per_response,
                c.max_words_per_entry,
                c.max_entries
            ),
            (18, 40, 15, 40, 40, 20)
        );
    }

    #[test]
    fn zero_limit_is_rejected() {
        let mut p = PaddingLimits::persona_chat();
        p.max_entries = 0;
        assert!(p.validate().is_err());
    }
}
