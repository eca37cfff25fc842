//! Diffusion image editing where each edit is a composition of atomic,
//! mask-localized tasks selected by learned task tokens.

pub mod composer;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthgen;
pub mod taskvocab;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use pipeline::EditModel;
