//! Corpus parsing, vocabulary construction, indexing/padding, and embedding
//! file handling.

mod embeddings;
mod episode;
mod index;
mod limits;
mod tokenize;
mod vocab;

pub use embeddings::{load_pretrained_embeddings, write_random_embeddings};
pub use episode::{
    parse_episodes, write_jsonl, CorpusFormat, RawEpisode, CANDIDATES_PER_EXAMPLE,
};
pub use index::{index_and_pad, IndexedExample, IndexedSentence};
pub use limits::PaddingLimits;
pub use tokenize::tokenize;
pub use vocab::{Vocab, PAD_ID, UNK_ID};
