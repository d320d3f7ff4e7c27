//! Energy-based test-time sample adaptation for multi-source domain
//! generalization.
//!
//! The library trains, per source domain, a discriminative energy model on
//! top of a shared feature trunk. At test time each sample is adapted by a
//! short Langevin chain that walks its features toward the low-energy
//! regions learned from the source domains, and only then classified. The
//! pieces compose bottom-up:
//!
//! * [`autodiff`]: reverse-mode differentiation over dense 2-D tensors.
//! * [`nets`]: the trunk, per-domain classifier, latent Gaussian heads and
//!   the spectrally normalized energy network.
//! * [`sgld`]: Langevin sampling, adaptation chains and the replay buffer.
//! * [`objective`]: the two contrastive training losses and their
//!   stop-gradient routing.
//! * [`trainer`]: the multi-domain training loop, Adam, checkpoints.
//! * [`inference`]: per-sample adaptation, prediction ensembles, step sweeps.
//! * [`data`]: the synthetic rotated benchmark and feature CSV I/O.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod inference;
pub mod nets;
pub mod objective;
pub mod par;
pub mod seeds;
pub mod sgld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
