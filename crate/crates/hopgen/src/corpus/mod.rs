//! Data model and ingestion: examples, flattening/truncation, JSONL
//! loading, synthetic bridge-question generation, vocabulary, and
//! integer encoding with BIO answer tags.

pub mod encode;
pub mod example;
pub mod hotpot;
pub mod synth;
pub mod vocab;

pub use encode::{decode_ids, encode_example, EncodedExample, NUM_TAGS, TAG_B, TAG_I, TAG_O};
pub use example::{flatten, AnswerLoc, Dataset, Example, FlatContext, FlatUnit, Paragraph};
pub use hotpot::load_hotpot_jsonl;
pub use synth::{generate_synthetic, generate_with, synthetic_triple, SynthOpts};
pub use vocab::{build_vocab, Vocab, EOS, PAD, RESERVED, SOS, UNK};
