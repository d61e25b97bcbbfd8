//! Single-forward-pass contrastive sentence embeddings on a miniature
//! decoder-only transformer, plus the diagnostics and cost accounting to
//! study what the training does to the embedding space.

pub mod checkpoint;
pub mod error;
pub mod model;
pub mod numkernel;
pub mod template;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
