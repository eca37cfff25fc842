//! The conditional denoising network and its building blocks.

pub mod attention;
pub mod fused;
pub mod im2col;
pub mod layers;
pub mod params;
pub mod unet;

pub use attention::{apply_ca_mask, build_mask_pyramid, downsample_mask, CrossAttention, MaskPyramid, PyramidTensors};
pub use params::{Init, ParamStore};
pub use unet::{DenoiseInput, Denoiser, NoisePredictor, UNetConfig};
