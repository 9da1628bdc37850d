//! Identity-conditioned face swapping on procedurally generated faces.
//!
//! The crate is a self-contained training pipeline: a dense-tensor autodiff
//! engine, an attention-enhanced encoder-decoder generator, a multi-scale
//! patch discriminator, a frozen identity embedder, GAN losses with scheduled
//! weights, a deterministic synthetic face dataset with exact identity and
//! attribute ground truth, evaluation metrics, and a CLI harness for
//! training, swapping, evaluation, and ablation sweeps.
//!
//! Everything is seeded and bitwise reproducible: same config and seed give
//! identical metric logs and checkpoints, and resuming from a checkpoint
//! replays the uninterrupted run exactly.

pub mod attention;
pub mod datasynth;
pub mod discriminator;
pub mod embedder;
pub mod error;
pub mod generator;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};

/// Epsilon used by every instance-normalization site in the crate.
pub const NORM_EPS: f64 = 1e-5;
