//! Multi-channel video-language retrieval.
//!
//! Videos are represented either by frozen continuous segment features or by
//! vocabulary words retrieved from those features, and fused with the text
//! channel by a shallow multimodal transformer or by a trainable text model.
//! All four combinations share one training and evaluation harness.

pub mod cli;
pub mod datasets;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod objectives;
pub mod text;
pub mod token_retrieval;
pub mod train;

pub use error::{Error, Result};
