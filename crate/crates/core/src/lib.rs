//! Desk-scale self-supervised speech pretraining by code distillation.
//!
//! Everything numerical lives here: a dense f64 tensor type with reverse-mode
//! automatic differentiation, an Adam optimizer, synthetic corpus generation,
//! MFCC feature extraction, k-means codebooks, span masking, a small
//! transformer encoder with code and speech front-ends, the three training
//! objectives (masked code prediction, EMA self-distillation, cross-modal
//! distillation), and clustering-quality metrics with a linear phone probe.
//!
//! The crate is `no_std` + `alloc`; file formats, run directories, and the
//! command-line surface live in the companion `cobert-cli` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod masking;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
