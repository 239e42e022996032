//! Blind-QP quality enhancement for block-compressed frames.
//!
//! One model enhances frames of unknown quantization parameter: a prior
//! encoder distills (ground truth, compressed frame, QP) into a compact
//! feature vector during training, a UNet decoder conditioned on that vector
//! reconstructs the residual, and a diffusion-based estimator recovers the
//! vector from the compressed frame alone at inference time.
//!
//! Modules:
//! - [`diffusion`]: schedules, forward noising, reverse sampling.
//! - [`nn`]: minimal CPU layer stack with hand-written backward passes.
//! - [`model`]: the encoder / decoder / estimator networks and checkpoints.
//! - [`codec`]: block-DCT quantization proxy and external encoder adapter.
//! - [`dataset`]: mixed-QP dataset construction, manifests, patch batching.
//! - [`train`]: two-stage optimization plus the NoEst / NoDiff ablations.
//! - [`eval`]: PSNR / delta-PSNR, manifest evaluation, report tables.
//! - [`cli`]: the `diffqe` command.

pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod num;
pub mod plane;
pub mod train;

pub use error::{Error, Result};
pub use plane::{Plane, QpMap};
