//! Group-wise 4-bit weight quantization: E0M4 floating point codes with a
//! two-bitwise-op dequantization, and an INT4 affine baseline.

pub mod e0m4;
pub mod half;
pub mod int4;

use thiserror::Error;

pub use e0m4::{dequantize_e0m4, quantize_e0m4, QuantGroupE0M4};
pub use half::{f16_to_f32, f32_to_f16, Half};
pub use int4::{dequantize_int4, quantize_int4, QuantGroupInt4};

pub const QUANT_MAGIC: &[u8; 4] = b"LGQ1";
pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuantError {
    #[error("non-finite value at group element {0}")]
    NonFinite(usize),
    #[error("exponent parameter n must be 1 or 2, got {0}")]
    InvalidExponent(u8),
    #[error("empty group")]
    EmptyGroup,
    #[error("bad magic, expected LGQ1")]
    BadMagic,
    #[error("truncated quantized-weight stream")]
    TruncatedStream,
    #[error("unknown scheme code {0}")]
    UnknownScheme(u8),
    #[error("invalid weight shape: {0}")]
    BadShape(String),
}

pub(crate) fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes.chunks(2).map(|c| (c[0] & 0x0F) | (c.get(1).copied().unwrap_or(0) << 4)).collect()
}

#[inline]
pub(crate) fn unpack_nibble(packed: &[u8], i: usize) -> u8 {
    let byte = packed[i / 2];
    if i.is_multiple_of(2) {
        byte & 0x0F
    } else {
        byte >> 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    E0M4,
    Int4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::E0M4 => "e0m4",
            Scheme::Int4 => "int4",
        }
    }

    pub fn from_name(s: &str) -> Option<Scheme> {
        match s {
            "e0m4" => Some(Scheme::E0M4),
            "int4" => Some(Scheme::Int4),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Scheme::E0M4 => 0,
            Scheme::Int4 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantGroup {
    E0M4(QuantGroupE0M4),
    Int4(QuantGroupInt4),
}

impl QuantGroup {
    pub fn len(&self) -> usize {
        match self {
            QuantGroup::E0M4(g) => g.len,
            QuantGroup::Int4(g) => g.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dequantize_into(&self, out: &mut [f32]) {
        match self {
            QuantGroup::E0M4(g) => e0m4::dequantize_into(g, out),
            QuantGroup::Int4(g) => int4::dequantize_into(g, out),
        }
    }
}

/// A `[K, N]` weight quantized in groups of `group_size` consecutive
/// elements along K. Groups are stored block-row-major: all N columns of
/// K-block 0, then K-block 1, and so on. A trailing K-block shorter than
/// `group_size` forms its own groups.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub scheme: Scheme,
    pub n: u8,
    pub group_size: usize,
    pub k: usize,
    pub cols: usize,
    pub groups: Vec<QuantGroup>,
}

impl QuantizedWeight {
    pub fn k_blocks(&self) -> usize {
        self.k.div_ceil(self.group_size)
    }

    pub fn block_rows(&self, block: usize) -> usize {
        self.group_size.min(self.k - block * self.group_size)
    }

    pub fn has_short_group(&self) -> bool {
        !self.k.is_multiple_of(self.group_size)
    }

    /// Dequantizes K-block `block` into `out` as a row-major
    /// `[block_rows, cols]` tile.
    pub fn dequantize_block(&self, block: usize, out: &mut [f32], column: &mut [f32]) {
        let rows = self.block_rows(block);
        for c in 0..self.cols {
            let g = &self.groups[block * self.cols + c];
            g.dequantize_into(&mut column[..rows]);
            for (r, v) in column[..rows].iter().enumerate() {
                out[r * self.cols + c] = *v;
            }
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.k * self.cols];
        let mut column = vec![0.0; self.group_size];
        let mut tile = vec![0.0; self.group_size * self.cols];
        for b in 0..self.k_blocks() {
            let rows = self.block_rows(b);
            self.dequantize_block(b, &mut tile, &mut column);
            let start = b * self.group_size * self.cols;
            out[start..start + rows * self.cols].copy_from_slice(&tile[..rows * self.cols]);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = QUANT_MAGIC.to_vec();
        out.push(self.scheme.code());
        out.push(self.n);
        out.extend_from_slice(&(self.group_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for g in &self.groups {
            match g {
                QuantGroup::E0M4(g) => {
                    out.extend_from_slice(&g.codes);
                    out.extend_from_slice(&g.scale.to_le_bytes());
                    out.extend_from_slice(&g.bias.0.to_le_bytes());
                }
                QuantGroup::Int4(g) => {
                    out.extend_from_slice(&g.codes);
                    out.extend_from_slice(&g.min.to_le_bytes());
                    out.extend_from_slice(&g.step.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedWeight, QuantError> {
        if bytes.len() < 4 || &bytes[..4] != QUANT_MAGIC {
            return Err(QuantError::BadMagic);
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], QuantError> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(QuantError::TruncatedStream);
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let scheme = match take(1)?[0] {
            0 => Scheme::E0M4,
            1 => Scheme::Int4,
            c => return Err(QuantError::UnknownScheme(c)),
        };
        let n = take(1)?[0];
        let group_size = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let k = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if group_size == 0 {
            return Err(QuantError::BadShape("group_size 0".into()));
        }
        let mut groups = Vec::new();
        for b in 0..k.div_ceil(group_size) {
            let rows = group_size.min(k - b * group_size);
            for _ in 0..cols {
                let codes = take(rows.div_ceil(2))?.to_vec();
                let f = |s: &[u8]| f32::from_le_bytes(s.try_into().expect("4 bytes"));
                groups.push(match scheme {
                    Scheme::E0M4 => {
                        let scale = f(take(4)?);
                        let bias = Half(u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")));
                        QuantGroup::E0M4(QuantGroupE0M4 { codes, len: rows, scale, bias, n })
                    }
                    Scheme::Int4 => {
                        let min = f(take(4)?);
                        let step = f(take(4)?);
                        QuantGroup::Int4(QuantGroupInt4 { codes, len: rows, min, step })
                    }
                });
            }
        }
        if pos != bytes.len() {
            return Err(QuantError::BadShape("trailing bytes after last group".into()));
        }
        Ok(QuantizedWeight { scheme, n, group_size, k, cols, groups })
    }
}

/// Quantizes a row-major `[k, cols]` matrix.
pub fn quantize_weight(
    w: &[f32],
    k: usize,
    cols: usize,
    scheme: Scheme,
    n: u8,
    group_size: usize,
) -> Result<QuantizedWeight, QuantError> {
    if w.len() != k * cols || k == 0 || cols == 0 {
        return Err(QuantError::BadShape(format!("{} values for [{k}, {cols}]", w.len())));
    }
    if group_size == 0 || group_size > u16::MAX as usize {
        return Err(QuantError::BadShape(format!("group_size {group_size}")));
    }
    if scheme == Scheme::E0M4 && n != 1 && n != 2 {
        return Err(QuantError::InvalidExponent(n));
    }
    let mut groups = Vec::with_capacity(k.div_ceil(group_size) * cols);
    let mut column = Vec::with_capacity(group_size);
    for b in 0..k.div_ceil(group_size) {
        let rows = group_size.min(k - b * group_size);
        for c in 0..cols {
            column.clear();
            column.extend((0..rows).map(|r| w[(b * group_size + r) * cols + c]));
            groups.push(match scheme {
                Scheme::E0M4 => QuantGroup::E0M4(quantize_e0m4(&column, n)?),
                Scheme::Int4 => QuantGroup::Int4(quantize_int4(&column)?),
            });
        }
    }
    Ok(QuantizedWeight { scheme, n, group_size, k, cols, groups })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeReport {
    pub mae_fp4: f64,
    pub mae_int4: f64,
    /// `None` when the INT4 error is exactly zero.
    pub ratio: Option<f64>,
}

pub fn mean_abs_error(a: &[f32], b: &[f32]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    total / a.len() as f64
}

/// MAE of both schemes against the original `[k, cols]` weight.
pub fn mae_compare(w: &[f32], k: usize, cols: usize, group_size: usize, n: u8) -> Result<MaeReport, QuantError> {
    let fp4 = quantize_weight(w, k, cols, Scheme::E0M4, n, group_size)?.dequantize();
    let int4 = quantize_weight(w, k, cols, Scheme::Int4, n, group_size)?.dequantize();
    let mae_fp4 = mean_abs_error(w, &fp4);
    let mae_int4 = mean_abs_error(w, &int4);
    let ratio = (mae_int4 > 0.0).then(|| mae_fp4 / mae_int4);
    Ok(MaeReport { mae_fp4, mae_int4, ratio })
}
