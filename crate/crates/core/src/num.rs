//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of the waveform configuration (radar cubes, FFT
//! chains, heatmaps, BEV images, networks, samplers, metrics) is generic
//! over [`Float`], so the same code runs in `f32` for throughput and in
//! `f64` for oracle-grade verification. Concrete aliases for the common
//! instantiations live at the crate root.

use ndarray::ScalarOperand;
use num_traits as nt;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar used throughout the numeric core.
pub trait Float:
    nt::Float
    + nt::FloatConst
    + nt::NumAssign
    + nt::FromPrimitive
    + nt::ToPrimitive
    + ScalarOperand
    + std::iter::Sum<Self>
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Storage width marker for the binary file formats.
    const DTYPE: Dtype;

    /// Draw one standard-normal variate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

/// Scalar storage width, recorded in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

macro_rules! impl_float {
    ($ty:ty, $dtype:expr) => {
        impl Float for $ty {
            const DTYPE: Dtype = $dtype;

            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$ty>>::sample(&StandardNormal, rng)
            }
        }
    };
}

impl_float!(f32, Dtype::F32);
impl_float!(f64, Dtype::F64);

/// Convert an `f64` constant into the working scalar type.
///
/// Panics on non-representable input, which cannot happen for the finite
/// literals this crate feeds it.
#[inline]
pub fn real<T: Float>(v: f64) -> T {
    T::from_f64(v).expect("finite f64 constant")
}
