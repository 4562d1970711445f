//! Training and evaluation toolkit for deepfake detection via deep
//! information decomposition.
//!
//! The pipeline decomposes backbone features into deepfake-relevant,
//! domain-relevant, and residual parts with complementary attention masks,
//! decorrelates them through an adversarial mutual-information estimator
//! behind a gradient-reversal layer, and trains with a margin-based AUC
//! surrogate blended with BCE. Synthetic multi-domain forgery data makes
//! leave-one-domain-out experiments runnable on a desk.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod seed;
pub mod training;
pub mod graph;
pub mod losses;
pub mod tensor;

pub use error::{DidError, Result};
pub use tensor::Tensor;
