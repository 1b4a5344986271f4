//! Self-supervised pre-training of Siamese convolutional networks on
//! multitemporal image pairs, feature-layer selection by cross-validation and
//! pixel-level change detection.
//!
//! The pipeline has three phases:
//!
//! 1. [`trainer::pretrain`] fits a small Siamese network on a pretext task
//!    (overlap classification or triplet embedding) using patches cut from
//!    unlabelled image pairs.
//! 2. [`trainer::run_cv`] scores each convolutional layer by training a linear
//!    change classifier on its feature differences with k-fold
//!    cross-validation, and [`metrics::rank_layers`] picks the best one.
//! 3. [`detect`] turns the selected layer into binary change maps, either by
//!    change vector analysis with an automatic histogram threshold or with the
//!    supervised linear classifier.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
