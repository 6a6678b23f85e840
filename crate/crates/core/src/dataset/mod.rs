//! Corpus ingestion, splitting, vocabularies, word embeddings and synthetic
//! corpora.

pub mod corpus;
pub mod split;
pub mod synthetic;
pub mod vocab;
pub mod word2vec;

pub use corpus::{
    load_corpus, positive_rate_vector, relation_positive_rates, save_corpus, Corpus, CorpusPair, ImageRef, RelationVocab, Schema,
    SplitTag,
};
pub use split::{split_corpus, split_corpus_with, SplitConfig, Splits};
pub use synthetic::{generate_synthetic, generate_synthetic_corpus, SyntheticConfig};
pub use vocab::{build_vocab, tokenize, tokenize_and_pad, TokenSequence, Vocab, PAD_ID, UNK_ID};
pub use word2vec::{train_word_embeddings, EmbeddingTable, Word2VecConfig};
