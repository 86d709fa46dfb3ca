//! Corpus machinery: subword segmentation, vocabulary, triple preparation
//! and token-count batching.

mod bpe;
mod corpus;
mod vocab;

pub use bpe::{frequency_path, join_subwords, learn_bpe, BpeModel, DEFAULT_MARKER};
pub use corpus::{
    encode_triples, make_batches, prepare_triples, read_lines, read_triples, tokenize, Batch,
    PrepareConfig, SideBatch, TextTriple, Triple,
};
pub use vocab::{build_vocab, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};
pub(crate) use corpus::batch_in_order;
