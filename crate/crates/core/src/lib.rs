//! Train small masked-token classifiers, statistically validate that
//! masked inputs stay in-distribution, and score how faithfully token
//! importance measures explain the trained model.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`data`]: synthetic classification tasks with known evidence tokens
//! - [`model`]: a small transformer encoder with in-repo reverse-mode
//!   autodiff, embedding traces, and input gradients
//! - [`train`]: masked fine-tuning with the train/validation strategy
//!   ablation matrix
//! - [`masf`]: the Max-Simes-Fisher in-distribution test over empirical
//!   CDFs of post-layer-norm embeddings
//! - [`ims`]: importance measures (gradient, input-times-gradient,
//!   integrated gradients, leave-one-out, beam search, random)
//! - [`faith`]: recursive masking curves, ACU/RACU areas, and BCa
//!   bootstrap intervals

pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod faith;
pub mod ims;
pub mod masf;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
