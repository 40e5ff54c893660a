//! Minimal neural-network stack with hand-written backward passes.

pub mod adam;
pub mod ops;
pub mod params;
pub mod perceptual;
pub mod unet;

pub use adam::Adam;
pub use params::{GradSet, ParamId, ParamSet};
pub use perceptual::{perceptual_distance, perceptual_distance_with_grad, FeatureNet};
pub use unet::{TinyUNet, UNetCache, UNetConfig};
