//! Infrared/visible image fusion with object-aware contextual contrastive
//! training.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autograd`]),
//! the feature-interaction fusion network ([`fusion_net`]), mask algebra and
//! providers ([`mask`], [`provider`]), the contextual contrastive objective
//! ([`contextual`]), pixel losses, quality metrics, data handling and the
//! training loop used by the `ivfuse` command line tool.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contextual;
pub mod data;
pub mod error;
pub mod fusion_net;
pub mod gradcheck;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pixel_losses;
pub mod provider;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
