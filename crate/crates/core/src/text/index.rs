//! Turning raw episodes into fixed-shape id grids.
//!
//! Sequences longer than their limit truncate: utterances and entries keep
//! the LAST ones, words within a sentence keep the FIRST ones, characters
//! within a word keep the FIRST ones. Shorter sequences zero-pad.

use super::episode::RawEpisode;
use super::limits::PaddingLimits;
use super::tokenize::tokenize;
use super::vocab::{Vocab, PAD_ID};

/// One sentence as fixed-size word/char id grids plus true lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedSentence {
    /// `[max_words]` word ids, PAD beyond `len`.
    pub word_ids: Vec<u32>,
    /// `[max_words x max_chars]` char ids, PAD beyond each word's chars.
    pub char_ids: Vec<Vec<u32>>,
    /// True character count per word slot (0 for padding slots).
    pub char_lens: Vec<usize>,
    /// True word count.
    pub len: usize,
}

impl IndexedSentence {
    fn empty(max_words: usize, max_chars: usize) -> Self {
        IndexedSentence {
            word_ids: vec![PAD_ID; max_words],
            char_ids: vec![vec![PAD_ID; max_chars]; max_words],
            char_lens: vec![0; max_words],
            len: 0,
        }
    }

    fn from_text(text: &str, vocab: &Vocab, max_words: usize, max_chars: usize) -> Self {
        let mut s = IndexedSentence::empty(max_words, max_chars);
        let words = tokenize(text);
        // keep the first `max_words` words of the sentence
        for (wi, word) in words.iter().take(max_words).enumerate() {
            s.word_ids[wi] = vocab.token_id(word);
            let mut n = 0;
            for (ci, c) in word.chars().take(max_chars).enumerate() {
                s.char_ids[wi][ci] = vocab.char_id(c);
                n = ci + 1;
            }
            s.char_lens[wi] = n;
            s.len = wi + 1;
        }
        s
    }
}

/// One ranking instance as padded id grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedExample {
    /// `max_utterances` sentences, the last ones of the dialogue.
    pub context: Vec<IndexedSentence>,
    /// `max_entries` sentences, the last entries of the description.
    pub knowledge: Vec<IndexedSentence>,
    /// All candidate responses, in corpus order.
    pub candidates: Vec<IndexedSentence>,
    pub label: usize,
}

impl IndexedExample {
    /// Count of non-empty context utterances (valid ones come first).
    pub fn n_valid_utterances(&self) -> usize {
        self.context.iter().filter(|s| s.len > 0).count()
    }

    pub fn n_valid_entries(&self) -> usize {
        self.knowledge.iter().filter(|s| s.len > 0).count()
    }
}

fn index_group(
    texts: &[String],
    keep_last: usize,
    vocab: &Vocab,
    max_words: usize,
    max_chars: usize,
) -> Vec<IndexedSentence> {
    let start = texts.len().saturating_sub(keep_last);
    let mut out: Vec<IndexedSentence> = texts[start..]
        .iter()
        .map(|t| IndexedSentence::from_text(t, vocab, max_words, max_chars))
        .collect();
    while out.len() < keep_last {
        out.push(IndexedSentence::empty(max_words, max_chars));
    }
    out
}

pub fn index_and_pad(
    episode: &RawEpisode,
    vocab: &Vocab,
    limits: &PaddingLimits,
) -> IndexedExample {
    IndexedExample {
        context: index_group(
            &episode.context,
            limits.max_utterances,
            vocab,
            limits.max_words_per_utterance,
            limits.max_chars_per_word,
        ),
        knowledge: index_group(
            &episode.knowledge,
            limits.max_entries,
            vocab,
            limits.max_words_per_entry,
            limits.max_chars_per_word,
        ),
        candidates: episode
            .candidates
            .iter()
            .map(|c| {
                IndexedSentence::from_text(
                    c,
                    vocab,
                    limits.max_words_per_response,
                    limits.max_chars_per_word,
                )
            })
            .collect(),
        label: episode.label,
    }
}
