//! Desk-scale cross-modal radar perception toolkit.
//!
//! The crate covers the full loop for studying radar-to-BEV point-cloud
//! generation on synthetic scenes:
//!
//! - [`signal`]: scatterer scenes and FMCW IF-signal simulation;
//! - [`dsp`]: range / Doppler / angle FFT chain and heatmaps;
//! - [`cfar`]: classical CA/OS detectors as the point-cloud baseline;
//! - [`geometry`]: polar BEV images and point-cloud conversions;
//! - [`nn`]: a tiny conditional U-Net with hand-rolled backprop;
//! - [`denoiser`]: the pluggable clean-image predictor and its training loss;
//! - [`diffusion`]: noise schedule, probability-flow sampler, score probe;
//! - [`consistency`]: consistency wrapper, distillation, one-step sampling;
//! - [`metrics`]: Chamfer / Hausdorff / F-Score and CDF reporting;
//! - [`io`]: binary tensor, checkpoint, scene and graymap file formats.
//!
//! All numeric code is generic over the [`num::Float`] scalar so the same
//! pipeline runs in `f32` for speed and `f64` wherever oracle-grade
//! precision matters.

// `!(x > 0.0)` style guards are deliberate: they reject NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfar;
pub mod consistency;
pub mod denoiser;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod num;
pub mod signal;

pub use error::{Error, Result};
pub use num::Float;

/// Concrete aliases for the common instantiations: `f64` on the simulation
/// and verification path, `f32` on the learned path.
pub type RadarCube64 = signal::RadarCube<f64>;
pub type RadarCube32 = signal::RadarCube<f32>;
pub type Rah64 = dsp::RangeAzimuthHeatmap<f64>;
pub type Rah32 = dsp::RangeAzimuthHeatmap<f32>;
pub type Rdh64 = dsp::RangeDopplerHeatmap<f64>;
pub type Bev64 = geometry::BevImage<f64>;
pub type Bev32 = geometry::BevImage<f32>;
pub type Cloud64 = geometry::PointCloud2D<f64>;
pub type Cloud32 = geometry::PointCloud2D<f32>;
pub type UNet32 = nn::TinyUNet<f32>;
pub type UNet64 = nn::TinyUNet<f64>;
