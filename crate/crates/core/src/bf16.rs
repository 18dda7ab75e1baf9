//! Software bfloat16: the top 16 bits of an IEEE binary32.

use std::fmt;

/// A bfloat16 value stored as raw bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Bf16(pub u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);
    pub const ONE: Bf16 = Bf16(0x3F80);

    /// Rounds to nearest, ties to even. NaN stays NaN (quieted, sign kept).
    #[inline]
    pub fn from_f32(x: f32) -> Bf16 {
        let bits = x.to_bits();
        if x.is_nan() {
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16((rounded >> 16) as u16)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x007F) != 0
    }
}

impl From<f32> for Bf16 {
    fn from(x: f32) -> Self {
        Bf16::from_f32(x)
    }
}

impl From<Bf16> for f32 {
    fn from(x: Bf16) -> Self {
        x.to_f32()
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:?})", self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Free-function spelling of [`Bf16::from_f32`].
pub fn to_bf16(x: f32) -> Bf16 {
    Bf16::from_f32(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert_eq!(to_bf16(1.0).to_f32(), 1.0);
        assert_eq!(to_bf16(0.0).to_bits(), 0);
        assert_eq!(to_bf16(-0.0).to_bits(), 0x8000);
        assert_eq!(to_bf16(f32::INFINITY).to_bits(), 0x7F80);
        assert_eq!(to_bf16(f32::NEG_INFINITY).to_bits(), 0xFF80);
        assert!(to_bf16(f32::NAN).is_nan());
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-8 sits exactly between 1.0 and 1 + 2^-7
        assert_eq!(to_bf16(f32::from_bits(0x3F80_8000)).to_bits(), 0x3F80);
        // 1 + 3 * 2^-8 sits between 1 + 2^-7 (odd) and 1 + 2^-6 (even)
        assert_eq!(to_bf16(f32::from_bits(0x3F81_8000)).to_bits(), 0x3F82);
        // the literal 1.0039062 parses to the same tie
        assert_eq!(to_bf16(1.003_906_2).to_bits(), 0x3F80);
        assert_eq!(to_bf16(f32::from_bits(0x3F80_8001)).to_bits(), 0x3F81);
    }

    #[test]
    fn overflow_and_subnormals() {
        assert_eq!(to_bf16(f32::MAX).to_bits(), 0x7F80);
        assert_eq!(to_bf16(f32::from_bits(0x0000_8000)).to_bits(), 0x0000);
        assert_eq!(to_bf16(f32::from_bits(0x0001_8000)).to_bits(), 0x0002);
    }

    #[test]
    fn small_integers_are_exact() {
        for i in -256..=256 {
            assert_eq!(to_bf16(i as f32).to_f32(), i as f32);
        }
    }
}
