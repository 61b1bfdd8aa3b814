//! Desk-scale GAN toolkit: a dual contrastive adversarial loss, patch-adaptive
//! self-attention for generators, a reference-attention Siamese
//! discriminator, Fréchet-distance metrics and a deterministic training
//! harness, all on top of a small reverse-mode autodiff engine.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
