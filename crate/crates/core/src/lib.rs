//! Abstractive summarization of news comment threads with a like-driven
//! attention encoding.
//!
//! The pipeline: [`corpus`] cleans and splits raw threads, [`tokenizer`]
//! trains a subword vocabulary, [`model`] holds the encoder-decoder,
//! [`training`] samples targets and optimizes, [`decoding`] runs beam
//! search and [`evaluation`] scores summaries against the likes.

pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
