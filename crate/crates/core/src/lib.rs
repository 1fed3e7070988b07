//! Gaussian pixel embeddings, composed prototypes and kernel contrast at desk scale.
//!
//! Pixel embeddings are diagonal Gaussians; class prototypes are products of
//! the teacher's source-pixel Gaussians; contrastive logits are probability
//! product kernels between them. The crate bundles a small reverse-mode
//! autodiff engine, a synthetic domain-shift world generator, the mean-teacher
//! self-training loop with ambiguity-guided cropping, and segmentation metrics.

pub mod agc;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prototypes;
pub mod rng;
pub mod similarity;
pub mod synthdata;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use gaussian::{compose_product, ema_blend, CanonicalGaussian, DiagonalGaussian};
pub use similarity::SimilarityKind;
