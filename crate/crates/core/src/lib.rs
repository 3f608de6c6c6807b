//! Component-aware two-stage sketch-to-image synthesis.
//!
//! Stage 1 trains one self-attention autoencoder per facial component.
//! Stage 2 maps the component latents to placed feature maps, fuses them
//! with a coordinate-gated generator and trains adversarially. An optional
//! refinement network then iterates on the coarse output.

pub mod afig;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod saliency;
pub mod sarr;
pub mod stage1;
pub mod util;

pub use error::{Error, Result};
