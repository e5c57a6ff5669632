//! Software emulation of every number format in the pipeline, with
//! bit-exact rounding and truncation semantics.
//!
//! Emulated values are returned widened to `f64`: the result of a cast is
//! the exact real value of the low-precision code, so downstream f64
//! arithmetic adds no error beyond the emulation itself.
//!
//! Conventions:
//! - rounding is round-to-nearest-even everywhere;
//! - FP8 E4M3 follows the finite-only convention (no infinities, saturate
//!   on overflow at ±448), E5M2 saturates at ±57344, FP16 at ±65504;
//! - subnormals are supported in all floating formats;
//! - FP22 is modeled as FP32 with the 10 low mantissa bits zeroed.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Numeric formats that appear anywhere in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LowPrecisionFormat {
    Int4,
    Int8,
    Fp8E4m3,
    Fp8E5m2,
    Fp16,
    Fp22,
    Fp32,
    Fp64,
}

impl LowPrecisionFormat {
    /// Exponent bits for floating formats, `None` for integer formats.
    pub fn exponent_bits(self) -> Option<u32> {
        match self {
            Self::Int4 | Self::Int8 => None,
            Self::Fp8E4m3 => Some(4),
            Self::Fp8E5m2 => Some(5),
            Self::Fp16 => Some(5),
            Self::Fp22 => Some(8),
            Self::Fp32 => Some(8),
            Self::Fp64 => Some(11),
        }
    }

    /// Mantissa bits for floating formats, `None` for integer formats.
    pub fn mantissa_bits(self) -> Option<u32> {
        match self {
            Self::Int4 | Self::Int8 => None,
            Self::Fp8E4m3 => Some(3),
            Self::Fp8E5m2 => Some(2),
            Self::Fp16 => Some(10),
            Self::Fp22 => Some(13),
            Self::Fp32 => Some(23),
            Self::Fp64 => Some(52),
        }
    }

    /// Largest representable code magnitude for integer formats.
    pub fn max_code(self) -> Option<i32> {
        match self {
            Self::Int4 => Some(7),
            Self::Int8 => Some(127),
            _ => None,
        }
    }

    /// Largest finite magnitude the format can hold.
    pub fn max_finite(self) -> f64 {
        match self {
            Self::Int4 => 7.0,
            Self::Int8 => 127.0,
            Self::Fp8E4m3 => 448.0,
            Self::Fp8E5m2 => 57344.0,
            Self::Fp16 => 65504.0,
            Self::Fp22 | Self::Fp32 => f32::MAX as f64,
            Self::Fp64 => f64::MAX,
        }
    }

    pub fn is_int(self) -> bool {
        matches!(self, Self::Int4 | Self::Int8)
    }
}

/// The two 8-bit floating point variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fp8Variant {
    E4M3,
    E5M2,
}

impl Fp8Variant {
    pub fn format(self) -> LowPrecisionFormat {
        match self {
            Self::E4M3 => LowPrecisionFormat::Fp8E4m3,
            Self::E5M2 => LowPrecisionFormat::Fp8E5m2,
        }
    }
}

/// Round-half-to-even of `x`, clamped to `[-max_code, +max_code]`.
pub fn round_to_int(x: f64, max_code: i32) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput(x));
    }
    let rounded = x.round_ties_even();
    Ok(rounded.clamp(-(max_code as f64), max_code as f64) as i32)
}

/// Round `x` to the nearest value of a binary floating format with the
/// given exponent/mantissa widths, saturating at `max_finite`.
///
/// Exact for any finite f64 input: the quantization grid step within a
/// binade is a power of two, so the scaled round-ties-even is itself exact.
fn round_to_float(x: f64, exp_bits: u32, mant_bits: u32, max_finite: f64) -> f64 {
    if x == 0.0 {
        return x;
    }
    let bias = (1i32 << (exp_bits - 1)) - 1;
    let min_normal_exp = 1 - bias;
    let e = ilog2_magnitude(x);
    let quantum_exp = e.max(min_normal_exp) - mant_bits as i32;
    let quantum = (quantum_exp as f64).exp2();
    let q = (x / quantum).round_ties_even() * quantum;
    q.clamp(-max_finite, max_finite)
}

/// Floor of log2(|x|) for finite nonzero x, from the f64 exponent field.
#[inline]
fn ilog2_magnitude(x: f64) -> i32 {
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7FF) as i32;
    if exp_field == 0 {
        // f64 subnormal: far below any emulated format's range; any
        // sufficiently small exponent flushes it to zero downstream.
        -1075
    } else {
        exp_field - 1023
    }
}

/// Nearest representable FP8 value of `x` (round-to-nearest-even,
/// subnormals supported), saturating above the max finite magnitude.
pub fn cast_fp8(x: f64, variant: Fp8Variant) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput(x));
    }
    Ok(match variant {
        Fp8Variant::E4M3 => round_to_float(x, 4, 3, 448.0),
        Fp8Variant::E5M2 => round_to_float(x, 5, 2, 57344.0),
    })
}

/// Nearest IEEE half-precision value, saturating at ±65504.
pub fn cast_fp16(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    round_to_float(x, 5, 10, 65504.0)
}

/// Zero out the 10 least-significant bits of the single-precision mantissa
/// of `x`; sign and exponent unchanged, truncation toward zero in
/// magnitude. NaN and infinity pass through unchanged.
///
/// The caller is expected to hand in a value that is already exactly
/// representable in single precision; the `as f32` here only performs
/// the widening-contract conversion.
pub fn truncate_to_fp22(x: f64) -> f64 {
    let s = x as f32;
    if !s.is_finite() {
        return x;
    }
    f32::from_bits(s.to_bits() & !0x3FF) as f64
}

/// FP22 truncation applied directly to a single-precision value; used in
/// the accumulator emulation hot loop.
#[inline]
pub fn truncate_f32_to_fp22(s: f32) -> f32 {
    if !s.is_finite() {
        return s;
    }
    f32::from_bits(s.to_bits() & !0x3FF)
}
