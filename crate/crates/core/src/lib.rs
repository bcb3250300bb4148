//! Video outpainting with masked spatiotemporal latent diffusion.
//!
//! The crate implements the full desk-scale workflow: synthetic dataset
//! generation, a trainable frame-wise latent codec, a noise-prediction
//! denoiser conditioned on masked-video latents and global context frames,
//! a DDPM-style sampler, coarse-to-fine outpainting inference, and an
//! evaluation harness (MSE/PSNR/SSIM plus a blur metric).
//!
//! Two mask-training regimes are supported: per-frame random masking
//! (`MaskMode::M3ddm`) and temporally consistent masking
//! (`MaskMode::M3ddmPlus`), selectable at training time.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod video;

pub use error::{Error, Result};
pub use mask::{MaskMode, MaskStrategy};
pub use video::{LatentMask, LatentVideo, MaskVideo, VideoTensor};
