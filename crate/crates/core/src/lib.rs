//! Action transfer with a miniature image-to-video diffusion transformer.
//!
//! The crate is organised the way the pipeline runs:
//!
//! - [`synth_data`]: parametric sprite videos with ground-truth tracklets.
//! - [`codec`]: lossless space-to-depth latent codec and padding rules.
//! - [`diffusion`]: noise schedule, forward noising, loss and DDIM sampler.
//! - [`mmdit`]: joint-attention denoiser with additive attention bias.
//! - [`refadapter`]: low-rank adapters and random-frame conditioning.
//! - [`fae`]: per-reference frequency-aware embeddings and the bias schedule.
//! - [`metrics`]: text, motion, temporal and appearance metrics.
//! - [`harness`]: checkpoints, configuration and the staged pipeline.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod fae;
pub mod harness;
pub mod metrics;
pub mod mmdit;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod refadapter;
pub mod synth_data;
pub mod training;

pub use error::{Error, Result};
