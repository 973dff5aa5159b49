//! Documents, tokenization, vocabulary, keyword derivation, BIO targets,
//! JSONL I/O and the synthetic corpus generator.

mod document;
mod io;
mod synth;
mod tokenize;
mod vocab;

pub use document::{
    bio_labels, decode_bio, derive_keywords, find_run, split_claims, Bio, DocumentSegment, KeyphraseSet, KeywordSpan,
    MultiLevelDocument, RawDocument,
};
pub use io::{load_corpus, load_jsonl, parse_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use synth::{synth_corpus, synth_raw, VocabProfile};
pub use tokenize::{tokenize, tokenize_sentences, DIGIT_TOKEN, SEP_TOKEN};
pub use vocab::{Vocab, BOS, DIGIT, EOS, NULL, NULL_TOKEN, PAD, SEP, UNK};

pub const DEFAULT_MAX_SEGMENT_TOKENS: usize = 48;
