//! Deterministic dense numeric kernel: matrix algebra, masked softmax,
//! normalization, singular values, seeded initialization, and the reverse-mode
//! gradient tape for the fixed computation graph the model and losses use.

mod init;
mod matrix;
mod svd;
mod tape;

pub use init::{derive_seed, seeded_init, InitScheme};
pub use matrix::{causal_mask, gelu, gelu_grad, masked_softmax, rms_norm, Matrix, RMS_NORM_EPS};
pub use svd::singular_values;
pub use tape::{dropout_mask, Adjoints, NodeId, Tape};
