//! Occlusion removal with one-shot test-time adaptation, end to end:
//! a physics simulator that composes occlusion-degraded images, a paired
//! dataset generator, a two-branch multi-scale restoration network with a
//! self-supervised reconstruction branch, joint training, per-image
//! adaptation, and a PSNR/SSIM evaluation harness.

pub mod adaptation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod imaging;
pub mod losses;
pub mod network;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageTensor;
