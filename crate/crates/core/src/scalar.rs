//! Scalar abstraction over the supported floating-point types.
//!
//! All numeric code is generic over [`Scalar`] so the same kernels run in
//! 32-bit mode (training) and 64-bit mode (gradient checking). Concrete
//! aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Scalar: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Bit width of the storage format (32 or 64).
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Append the native little-endian byte representation to `out`.
    fn write_le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
