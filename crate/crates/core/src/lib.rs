//! Hierarchical paragraph encoders for answer-aware question generation.
//!
//! Four architectures share one interface: a flat BiLSTM encoder-decoder
//! with attention, a hierarchical BiLSTM with word-level softmax and
//! sentence-level sparsemax attention, a flat Transformer, and a hierarchical
//! Transformer whose decoder attends to the paragraph through multi-head
//! hierarchical attention.

pub mod attention;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod init;
pub mod model;
pub mod recurrent;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
