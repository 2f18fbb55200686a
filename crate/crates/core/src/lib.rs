//! Diffusion models as representation learners.
//!
//! The crate trains small denoising U-Nets and turns their intermediate
//! activations into classification features:
//!
//! - [`ddpm`]: noise schedules, noising, the training loss and sampling.
//! - [`unet`]: the denoiser with numbered, tappable blocks.
//! - [`features`]: noised-image feature extraction and pooling.
//! - [`heads`]: linear, MLP, CNN and attention heads, multi-timestep fusion,
//!   and the probe training loop.
//! - [`diffeed`]: two-pass extraction with decoder-to-encoder feedback.
//! - [`analysis`]: CKA, kNN and grid sweeps.
//! - [`harness`]: datasets, optimizer, checkpoints, configs and reports.

pub mod analysis;
pub mod ddpm;
pub mod diffeed;
pub mod error;
pub mod features;
pub mod harness;
pub mod heads;
pub mod unet;

pub use diffrep_tensor as tensor;
pub use error::{Error, Result};
