//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// On-disk tag for the element type of a parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar used by tensors, schedules, denoisers and losses.
///
/// Implemented for `f32` and `f64`. Verification paths are run in `f64`;
/// training works in either.
pub trait Scalar:
    'static
    + Send
    + Sync
    + Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
{
    const DTYPE: DType;

    /// Converts an `f64` constant. Panics only on a broken `FromPrimitive` impl.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.25f64.write_le(&mut buf);
        (-3.5f32).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf[..8]), 1.25);
        assert_eq!(f32::read_le(&buf[8..]), -3.5);
        assert_eq!(DType::from_tag(2), Some(DType::F64));
        assert_eq!(DType::from_tag(9), None);
    }
}
