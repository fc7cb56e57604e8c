//! Joint latent training for few-shot image classification, at desk scale.
//!
//! The library trains a small convolutional image encoder together with a
//! two-layer latent encoder. The latent branch consumes latent representations
//! captured from a toy class-conditional latent diffusion model; the image
//! branch consumes both real support images and the decoded generations. All
//! arithmetic is `f64` on a tape-based reverse-mode autodiff core, so every
//! gradient in the pipeline can be checked against central finite differences.
//!
//! The crate is organized as a library first. Each major capability has a
//! runnable example:
//!
//! ```text
//! cargo run --release -p jolt --example autodiff_basics     # tape, backward, finite differences
//! cargo run --release -p jolt --example synthetic_episodes  # dataset, episodes, augmentation
//! cargo run --release -p jolt --example latent_diffusion    # schedule, denoiser, conditional sampling
//! cargo run --release -p jolt --example joint_training      # the full two-phase training loop
//! cargo run --release -p jolt --example baseline_comparison # finetune vs augdata vs joint
//! cargo run --release -p jolt --example alpha_sweep         # latent-factor ablation grid
//! ```
//!
//! The one binary, `jolt`, is a thin shell over [`cli`]: `gen-data`,
//! `build-cache`, `train`, `eval`, `ablate`, `report`.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod nn;
pub mod presets;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
