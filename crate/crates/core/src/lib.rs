//! Depth-guided two-phase video diffusion.
//!
//! A depth video is sampled from an unconditional video diffusion model, then
//! translated to RGB by a dual-U-Net conditional diffusion model sampled with
//! classifier-free guidance. The conditional model is trained on depth videos
//! that were noised and re-denoised by the depth model, so that its training
//! inputs look like the depth it receives at generation time.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod unet3d;
pub mod vdm;
pub mod vid2vid;

pub use error::{Error, Result};
