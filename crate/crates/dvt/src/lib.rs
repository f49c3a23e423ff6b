//! Semi-supervised variational transfer learning.
//!
//! A variational autoencoder whose latent prior is a Gaussian mixture with
//! one component per class, shared across data domains. Domains share encoder
//! trunk parameters; per-domain heads handle heterogeneous inputs and
//! likelihoods. Labeled rows pin the posterior to their class component;
//! unlabeled rows pick a component through a straight-through Gumbel-Softmax
//! sample of the latent classifier, so label information propagates through
//! the shared latent space. Transfer freezes the trunk and retrains the
//! target heads; multi-task training mixes both domains' objectives.
//!
//! Everything runs on a from-scratch reverse-mode tape over dense f64
//! tensors ([`tape`], [`tensor`]), with deterministic seeded streams
//! ([`rng`]) end to end: identical config, seed, and data reproduce outputs
//! byte for byte.

pub mod cli;
pub mod distributions;
pub mod error;
pub mod ioutil;
pub mod kernels;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
