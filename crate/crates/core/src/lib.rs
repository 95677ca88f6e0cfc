//! Response suggestion retrieval.
//!
//! The crate is organised along the serving path:
//!
//! - [`text`]: tokenization, n-gram extraction, frequency-ranked vocabularies and
//!   bag-of-n-gram featurization.
//! - [`encoder`]: embedding bags, tanh towers, the dot-product dual encoder and the
//!   joint scorer, each with multi-feature fusion.
//! - [`train`]: in-batch multiple-negatives and sigmoid objectives, reverse-mode
//!   gradients, plain SGD and a finite-difference gradient checker.
//! - [`bias`]: add-k bigram language model over responses and the additive
//!   log-prior bias, including its fold into the dot product.
//! - [`hq`]: hierarchical quantization (VQ, learned rotation, PQ of the rotated
//!   residual) with lookup-table scoring for maximum inner product search.
//! - [`serve`]: precomputed response sets and the exhaustive, two-pass and
//!   single-pass suggestion architectures.
//! - [`eval`]: dataset splits, P@1 against sampled distractors, ablations and the
//!   speed/recall benchmark.

pub mod bias;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hq;
pub mod io;
pub mod manifest;
pub mod numeric;
pub mod serve;
pub mod text;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
