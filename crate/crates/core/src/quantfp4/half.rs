//! IEEE-754 binary16 bit patterns and conversions.

/// Raw binary16 value: 1 sign bit, 5 exponent bits, 10 fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(pub u16);

impl Half {
    pub const ONE: Half = Half(0x3C00);

    pub fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn from_f32(x: f32) -> Half {
        f32_to_f16(x)
    }

    pub fn to_f32(self) -> f32 {
        f16_to_f32(self)
    }

    pub fn sign(self) -> u16 {
        self.0 >> 15
    }

    pub fn exponent(self) -> u16 {
        (self.0 >> 10) & 0x1F
    }

    pub fn fraction(self) -> u16 {
        self.0 & 0x3FF
    }

    pub fn is_nan(self) -> bool {
        self.exponent() == 0x1F && self.fraction() != 0
    }
}

/// Narrowing with round-to-nearest-even. Overflow goes to infinity,
/// tiny values to subnormals or signed zero, NaNs stay quiet NaNs with their
/// top payload bits kept.
pub fn f32_to_f16(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Half(sign | 0x7C00);
        }
        return Half(sign | 0x7E00 | (man >> 13) as u16);
    }
    let e = exp - 127;
    if e > 15 {
        return Half(sign | 0x7C00);
    }
    if e >= -14 {
        let half_exp = (e + 15) as u32;
        let mant = man >> 13;
        let rest = man & 0x1FFF;
        let mut out = (half_exp << 10) | mant;
        if rest > 0x1000 || (rest == 0x1000 && (mant & 1) == 1) {
            // A carry out of the fraction bumps the exponent, which is the
            // correctly rounded result (up to infinity).
            out += 1;
        }
        return Half(sign | out as u16);
    }
    if exp == 0 {
        // f32 subnormals are far below the binary16 range.
        return Half(sign);
    }
    // Result is a binary16 subnormal: value = m·2^(e-23), units of 2^-24.
    let m = man | 0x0080_0000;
    let shift = (-(e + 1)) as u32;
    if shift > 24 {
        return Half(sign);
    }
    let mant = m >> shift;
    let rest = m & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    let mut out = mant;
    if rest > halfway || (rest == halfway && (mant & 1) == 1) {
        out += 1;
    }
    Half(sign | out as u16)
}

/// Exact widening (NaN payloads are kept, the quiet bit set).
pub fn f16_to_f32(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let man = bits & 0x3FF;
    let out = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            let mut m = man;
            let mut e: i32 = -14;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            sign | (((e + 127) as u32) << 23) | ((m & 0x3FF) << 13)
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        // NaNs come out quiet, as hardware conversions do.
        (0x1F, _) => sign | 0x7FC0_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(out)
}
