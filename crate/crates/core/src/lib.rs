//! Bias-swapping augmentation for debiasing image classifiers without
//! bias-type supervision.
//!
//! The pipeline trains a deliberately biased classifier with the generalized
//! cross-entropy loss, splits the training set into bias-guiding and
//! bias-contrary examples by a confidence-based bias score, trains a swapping
//! autoencoder whose patch co-occurrence discriminator samples patches from the
//! biased classifier's class activation maps, and finally trains a debiased
//! classifier on the union of the original and bias-swapped images.

pub mod autograd;
pub mod bias_partition;
pub mod bias_swap_augment;
pub mod cam_sampler;
pub mod classifiers;
pub mod dataset_forge;
pub mod debias_pipeline;
mod error;
pub mod nn;
pub mod swap_autoencoder;

pub use error::{Error, Result};
