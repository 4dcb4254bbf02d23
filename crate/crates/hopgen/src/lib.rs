//! Multi-hop question generation over entity graphs.
//!
//! Given a multi-paragraph context and an answer span, the model encodes
//! the context with answer-aware co-attention, propagates answer
//! information across an entity graph, fuses the result back into the
//! context, and decodes a question with a copy-capable pointer decoder.
//! Everything runs on a small self-contained f64 autodiff core so the
//! whole pipeline is exactly testable on a desktop.

pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod entgraph;
pub mod error;
pub mod harness;
pub mod num;

pub use error::{Error, Result};
