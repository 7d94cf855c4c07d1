//! Context-enriched Bi-Encoder ranking for retrieval-based chatbots.
//!
//! A Bi-Encoder scores a conversation context against cached response
//! vectors. The enrichment head additionally compares the live context with
//! the training contexts nearest to each candidate response, using stores
//! that are built once offline.

pub mod data;
pub mod encoder;
pub mod enrichment;
pub mod error;
pub mod evaluation;
pub mod gru;
pub mod inference;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod params;
pub mod store;
pub mod training;
pub mod cli;

pub use error::{Error, Result};
