//! Asymmetric affine 4-bit baseline: `min + q * step`, `step = (max - min) / 15`.

use super::{pack_nibbles, unpack_nibble, QuantError};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantGroupInt4 {
    pub codes: Vec<u8>,
    pub len: usize,
    pub min: f32,
    pub step: f32,
}

impl QuantGroupInt4 {
    pub fn code(&self, i: usize) -> u8 {
        unpack_nibble(&self.codes, i)
    }

    pub fn codes_unpacked(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.code(i)).collect()
    }
}

pub fn quantize_int4(w0: &[f32]) -> Result<QuantGroupInt4, QuantError> {
    if w0.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    if let Some(i) = w0.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let min = w0.iter().copied().fold(f32::INFINITY, f32::min);
    let max = w0.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let step = if max == min { 1.0 } else { (max - min) / 15.0 };
    let codes: Vec<u8> = w0.iter().map(|&w| ((w - min) / step).round_ties_even().clamp(0.0, 15.0) as u8).collect();
    Ok(QuantGroupInt4 { codes: pack_nibbles(&codes), len: w0.len(), min, step })
}

pub fn dequantize_into(g: &QuantGroupInt4, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate().take(g.len) {
        *o = g.min + g.code(i) as f32 * g.step;
    }
}

pub fn dequantize_int4(g: &QuantGroupInt4) -> Vec<f32> {
    let mut out = vec![0.0; g.len];
    dequantize_into(g, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let g = quantize_int4(&[0.0, 1.0]).unwrap();
        assert_eq!(g.codes_unpacked(), vec![0, 15]);
        assert_eq!(dequantize_int4(&g), vec![0.0, 1.0]);
    }

    #[test]
    fn constant_group() {
        let g = quantize_int4(&[-0.25; 5]).unwrap();
        assert!(g.codes_unpacked().iter().all(|&c| c == 0));
        assert_eq!(dequantize_int4(&g), vec![-0.25; 5]);
    }

    #[test]
    fn half_steps_round_to_even() {
        // step = 1: 0.5 → 0, 1.5 → 2, 2.5 → 2.
        let g = quantize_int4(&[0.0, 0.5, 1.5, 2.5, 15.0]).unwrap();
        assert_eq!(g.codes_unpacked(), vec![0, 0, 2, 2, 15]);
    }
}
