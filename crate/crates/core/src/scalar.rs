//! Scalar abstraction over the floating-point element type.
//!
//! All numeric kernels in this crate are generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. `f64` is the reference/oracle path;
//! `f32` combined with the bf16 rounding helpers emulates a low-precision
//! I/O pipeline with full-width accumulation.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable by every kernel in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    /// Size of the little-endian wire encoding.
    const BYTES: usize;

    /// Gauss error function (exact GeLU needs it).
    fn erf(self) -> Self;

    /// Lossy conversion from `f64` (used for config constants).
    fn from_f64_lossy(v: f64) -> Self;

    /// Raw bits widened to `u64`, for bitwise equality checks.
    fn to_bits_u64(self) -> u64;

    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Decode from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Round to bf16 precision (round-to-nearest-even) and widen back.
    ///
    /// `f64` values pass through `f32` first; the double rounding is the
    /// documented deterministic convention for the 64-bit path.
    fn round_bf16(self) -> Self;
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("need 8 bytes"))
    }

    fn round_bf16(self) -> Self {
        f32_from_bf16_bits(bf16_bits_from_f32(self as f32)) as f64
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("need 4 bytes"))
    }

    fn round_bf16(self) -> Self {
        f32_from_bf16_bits(bf16_bits_from_f32(self))
    }
}

/// Truncate an `f32` to bf16 storage bits with round-to-nearest-even.
pub fn bf16_bits_from_f32(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        // Quiet the NaN so the truncated mantissa cannot read as infinity.
        return ((bits >> 16) as u16) | 0x0040;
    }
    let round = 0x7fff + ((bits >> 16) & 1);
    (bits.wrapping_add(round) >> 16) as u16
}

/// Widen bf16 storage bits back to `f32`.
pub fn f32_from_bf16_bits(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}
