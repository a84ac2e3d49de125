//! 16-bit brain floating point (1 sign, 8 exponent, 7 mantissa bits).
//!
//! BF16 is a truncated `f32`: widening is exact, narrowing rounds to nearest
//! with ties to even mantissa. Values are stored as raw bit patterns; all
//! arithmetic happens in `f32` or wider.

use serde::{Deserialize, Serialize};

/// A BF16 value, stored as its raw bit pattern.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bf16(u16);

impl Bf16 {
    /// Narrows an `f32`, rounding to nearest with ties to even mantissa.
    ///
    /// ±Inf is preserved; NaN maps to a quiet NaN that keeps the sign and the
    /// top payload bits. Overflowing finite values round to ±Inf.
    pub fn from_f32(value: f32) -> Self {
        let bits = value.to_bits();
        if value.is_nan() {
            return Bf16(((bits >> 16) as u16) | 0x0040);
        }
        // Round to nearest even: add 0x7FFF plus the parity of the bit that
        // will become the LSB, then truncate.
        let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
        Bf16((rounded >> 16) as u16)
    }

    /// Exact widening: zero-extend the low 16 bits.
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 2]) -> Self {
        Bf16(u16::from_le_bytes(bytes))
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x007F) != 0
    }
}

impl From<f32> for Bf16 {
    fn from(value: f32) -> Self {
        Bf16::from_f32(value)
    }
}

impl From<Bf16> for f32 {
    fn from(value: Bf16) -> Self {
        value.to_f32()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent bit-level oracle: add the round-to-nearest-even bias
    /// `((b >> 16) & 1) + 0x7FFF` and truncate.
    fn oracle_f32_to_bf16(x: f32) -> u16 {
        let b = x.to_bits();
        if x.is_nan() {
            return ((b >> 16) as u16) | 0x0040;
        }
        ((b.wrapping_add(((b >> 16) & 1) + 0x7FFF)) >> 16) as u16
    }

    #[test]
    fn exact_values() {
        assert_eq!(Bf16::from_f32(1.0).to_bits(), 0x3F80);
        assert_eq!(Bf16::from_bits(0x3F80).to_f32(), 1.0);
        assert_eq!(Bf16::from_bits(0x0000).to_f32(), 0.0);
        assert_eq!(Bf16::from_bits(0xC000).to_f32(), -2.0);
    }

    #[test]
    fn rounds_to_nearest() {
        // f32 bits 0x40490FDB (pi) -> 0x4049, i.e. 3.140625.
        let pi = f32::from_bits(0x4049_0FDB);
        let b = Bf16::from_f32(pi);
        assert_eq!(b.to_bits(), 0x4049);
        assert_eq!(b.to_f32(), 3.140625);
    }

    #[test]
    fn ties_round_to_even() {
        // Exactly halfway between 0x3F80 and 0x3F81: even mantissa wins.
        assert_eq!(Bf16::from_f32(f32::from_bits(0x3F80_8000)).to_bits(), 0x3F80);
        // Halfway between 0x3F81 (odd) and 0x3F82 (even): rounds up.
        assert_eq!(Bf16::from_f32(f32::from_bits(0x3F81_8000)).to_bits(), 0x3F82);
    }

    #[test]
    fn specials() {
        assert_eq!(Bf16::from_f32(f32::INFINITY).to_bits(), 0x7F80);
        assert_eq!(Bf16::from_f32(f32::NEG_INFINITY).to_bits(), 0xFF80);
        assert!(Bf16::from_f32(f32::NAN).is_nan());
        // Finite overflow rounds to infinity.
        assert_eq!(Bf16::from_f32(f32::MAX).to_bits(), 0x7F80);
    }

    #[test]
    fn round_trip_identity_all_patterns() {
        for bits in 0..=u16::MAX {
            let v = Bf16::from_bits(bits);
            if v.is_nan() {
                continue;
            }
            assert_eq!(Bf16::from_f32(v.to_f32()).to_bits(), bits, "pattern {bits:#06x}");
        }
    }

    #[test]
    fn matches_bit_oracle_on_random_values() {
        let mut rng = crate::numeric::Rng::new(0xBF16);
        for _ in 0..50_000 {
            let x = f32::from_bits(rand::Rng::random::<u32>(&mut rng));
            assert_eq!(
                Bf16::from_f32(x).to_bits(),
                oracle_f32_to_bf16(x),
                "bits {:#010x}",
                x.to_bits()
            );
        }
    }

    #[test]
    fn relative_error_bounded_for_normals() {
        let mut rng = crate::numeric::Rng::new(7);
        for _ in 0..20_000 {
            let x: f32 = rand::Rng::random_range(&mut rng, -1.0e20..1.0e20f32);
            if x == 0.0 {
                continue;
            }
            let rel = ((Bf16::from_f32(x).to_f32() - x) / x).abs();
            assert!(rel <= 2.0f32.powi(-8), "x={x}, rel={rel}");
        }
    }
}
