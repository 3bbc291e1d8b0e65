//! One-shot latent diffusion models over drawing datasets.
//!
//! The crate implements the full two-stage pipeline: a regularized
//! autoencoder (RAE) whose latent space can be shaped by six pluggable
//! regularizers (KL, vector quantization, classification, prototype,
//! SimCLR, Barlow), a 1-D denoising diffusion model trained on the frozen
//! RAE latents and sampled with classifier-free guidance, per-pixel
//! feature-importance maps obtained by chaining diffusion scores through
//! the decoder Jacobian, and an originality-vs-recognizability evaluation
//! harness with critic networks and the associated statistics.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! - `synthetic_dataset` — generate a glyph dataset in the on-disk episode format
//! - `train_tiny_rae` — train a small RAE and inspect reconstructions
//! - `regularizer_losses` — evaluate every regularizer on a toy batch
//! - `schedule_and_noising` — diffusion schedule coefficients and noising statistics
//! - `toy_diffusion_2d` — train a toy 2-D diffusion model and recover a two-mode density
//! - `sample_grid` — sample exemplar-conditioned variations into a PNG grid
//! - `attribution_map` — compute a feature-importance map and overlay it
//! - `importance_stats` — Spearman / Wilcoxon / bootstrap statistics on maps
//! - `beta_sweep` — run a miniature regularization-weight sweep end to end

pub mod attribution;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod rae;
pub mod regularizers;
pub mod seeds;

pub use error::{Error, Result};
