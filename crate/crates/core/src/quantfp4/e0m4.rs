//! E0M4: 4-bit codes that are the top four fraction bits of a binary16
//! value whose sign and exponent are fixed per group.
//!
//! Each group is mapped affinely into `[2^n, 2^(n+1) - eps]`, so every value
//! shares exponent `n + 15`. Dequantization reattaches that exponent with one
//! shift and one OR, then undoes the affine map.

use super::half::{f16_to_f32, f32_to_f16, Half};
use super::{pack_nibbles, unpack_nibble, QuantError};

/// Shift from a 4-bit code to its place in the binary16 fraction field
/// (10 fraction bits minus 4 stored bits).
pub const FRACTION_SHIFT: u32 = 6;

/// Sign and exponent bits shared by every reconstructed value of a group.
pub const fn exp_bin_part(n: u8) -> u16 {
    ((n as u16) + 15) << 10
}

/// The dequantization bit trick, literally: one OR, one shift.
#[inline(always)]
pub fn code_to_half_bits(code: u8, exp_part: u16) -> u16 {
    exp_part | ((code as u16) << FRACTION_SHIFT)
}

/// One binary16 ULP at exponent `n`.
pub fn eps_for(n: u8) -> f32 {
    2f32.powi(n as i32 - 9)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroupE0M4 {
    /// Two codes per byte, low nibble first.
    pub codes: Vec<u8>,
    pub len: usize,
    pub scale: f32,
    pub bias: Half,
    pub n: u8,
}

impl QuantGroupE0M4 {
    pub fn code(&self, i: usize) -> u8 {
        unpack_nibble(&self.codes, i)
    }

    pub fn codes_unpacked(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.code(i)).collect()
    }
}

fn check_n(n: u8) -> Result<(), QuantError> {
    if n == 1 || n == 2 {
        Ok(())
    } else {
        Err(QuantError::InvalidExponent(n))
    }
}

/// Encodes values against fixed group parameters.
pub fn encode_with(values: &[f32], scale: f32, bias: Half, n: u8) -> Vec<u8> {
    let lo = 2f32.powi(n as i32);
    let hi = 2f32.powi(n as i32 + 1) - eps_for(n);
    let b = f16_to_f32(bias);
    values
        .iter()
        .map(|&w0| {
            let w1 = (w0 * scale + b).clamp(lo, hi);
            let frac = f32_to_f16(w1).fraction();
            let y1 = (frac >> FRACTION_SHIFT) as u8;
            let y2 = ((frac >> (FRACTION_SHIFT - 1)) & 1) as u8;
            (y1 + y2).min(15)
        })
        .collect()
}

pub fn quantize_e0m4(w0: &[f32], n: u8) -> Result<QuantGroupE0M4, QuantError> {
    check_n(n)?;
    if w0.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    if let Some(i) = w0.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let min = w0.iter().copied().fold(f32::INFINITY, f32::min);
    let max = w0.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lo = 2f32.powi(n as i32);
    let hi = 2f32.powi(n as i32 + 1) - eps_for(n);
    let straddles_zero = min <= 0.0 && 0.0 <= max;

    let scale = if max == min { 1.0 } else { (hi - lo) / (max - min) };
    let mut bias = f32_to_f16(lo - min * scale);
    if straddles_zero {
        // Zero must land exactly on a code so it reconstructs exactly.
        bias = Half(bias.0 & !((1u16 << FRACTION_SHIFT) - 1));
    }
    let codes = encode_with(w0, scale, bias, n);
    Ok(QuantGroupE0M4 { codes: pack_nibbles(&codes), len: w0.len(), scale, bias, n })
}

pub fn dequantize_into(g: &QuantGroupE0M4, out: &mut [f32]) {
    let exp_part = exp_bin_part(g.n);
    let b = f16_to_f32(g.bias);
    for (i, o) in out.iter_mut().enumerate().take(g.len) {
        let w1 = f16_to_f32(Half(code_to_half_bits(g.code(i), exp_part)));
        *o = (w1 - b) / g.scale;
    }
}

pub fn dequantize_e0m4(g: &QuantGroupE0M4) -> Vec<f32> {
    let mut out = vec![0.0; g.len];
    dequantize_into(g, &mut out);
    out
}
