//! Rule-based symbolic multimodal corpus.
//!
//! Images are 2×2 attribute grids rendered into patch vectors; text targets
//! come from fixed templates over a closed vocabulary, so every target can be
//! re-derived from its image.

mod corpus;
mod generate;
mod image;
mod layout;
mod vocab;

pub use corpus::{
    corpus_to_string, deserialize, generate_corpus, parse_corpus, read_corpus, serialize, write_corpus, CorpusRecord, CorpusSpec,
    Split,
};
pub use generate::{
    base_caption, caption_clauses, classification_label, classification_label_space, vqa_answer_space, Generator, MetaTask,
    Question, TrainingInstance,
};
pub use image::{Border, Cell, CodeTable, Color, Shape, Size, SymbolicImage, DEFAULT_CODE_SEED, GRID_COLS, GRID_ROWS, JITTER_STD, PATCH_DIM};
pub use layout::{bridged_input, build_layout, joint_input, pair_input, text_query, BridgedInput, JointInput, PairInput, StageLayout};
pub use vocab::{Vocab, VOCAB_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{0}")]
    Io(String),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("layout: {0}")]
    Layout(String),
    #[error("code table: {0}")]
    CodeTable(String),
}
