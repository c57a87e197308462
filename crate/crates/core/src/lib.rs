//! Graph contrastive pre-training with learned augmentation-pair selection.
//!
//! The engine alternates two optimizations: gradient descent on a GIN
//! encoder (plus projection heads) under a contrastive loss, and projected
//! gradient ascent on the probability distribution over augmentation pairs,
//! regularized toward the uniform prior. Datasets come from TUDataset-style
//! flat files; evaluation is a cross-validated linear probe on frozen
//! embeddings.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod graph;
pub mod joao;
pub mod nn;
mod ops;
pub mod rng;
pub mod runlog;
pub mod synth;
pub mod tudataset;

pub use error::{Error, Result};
