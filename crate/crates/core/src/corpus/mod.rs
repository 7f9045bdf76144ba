//! Tokenization, vocabulary, passage construction and dataset files.

pub mod dataset;
pub mod tokens;
pub mod vocab;

pub use dataset::{
    load_dataset, parse_dataset, read_dataset_records, tokenize_dataset, validate_dataset, write_dataset, Dataset, DatasetLimits,
    Passage, PassageRecord, QARecord, QaEntry,
};
pub use tokens::{
    chunk_passages, detokenize, detokenize_ids, normalize_words, split_sentences, tokenize, tokenize_words, Span,
    TokenSequence,
};
pub use vocab::{TokenId, Vocabulary};
