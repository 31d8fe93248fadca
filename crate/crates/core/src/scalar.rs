//! Scalar abstraction: all numeric code is generic over `f32`/`f64`.
//!
//! Tests and oracles run at `f64`; `f32` is available for faster training
//! runs. Concrete type aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::str::FromStr;

/// Floating-point element type for tensors, parameters and losses.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + FromStr
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Bytes per value in checkpoint payloads (4 or 8).
    const WIDTH: u8;

    fn from_f64c(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 -> scalar conversion")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }

    /// Append this value to `out` in little-endian byte order.
    fn write_le(self, out: &mut Vec<u8>);

    /// Read one value from the front of `bytes` (must hold `WIDTH` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
