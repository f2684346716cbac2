//! Long-document abstractive summarization built around sliding-window +
//! global-token sparse attention.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] / [`graph`]: dense `f32` tensors and a reverse-mode tape.
//! - [`attention`]: attention patterns and the banded attention kernel,
//!   together with a dense reference used as a test oracle.
//! - [`model`]: encoder–decoder transformer with a softmax generation head.
//! - [`training`]: cross-entropy objective, per-tensor gradient clipping,
//!   Adam, checkpointed training loop.
//! - [`text`]: tokenizer, vocabulary, JSON-lines corpora, batching.
//! - [`decoding`]: greedy and beam search.
//! - [`evaluation`]: ROUGE, throughput, reports.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
