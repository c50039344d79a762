//! `LGW1` weight sidecar: magic, then records of
//! `{name_len: u32, name, dtype: u8, rank: u8, dims: u32[rank], payload}`,
//! all little-endian, until end of stream.

use indexmap::IndexMap;
use thiserror::Error;

use super::DType;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LGW1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightError {
    #[error("bad magic, expected LGW1")]
    BadMagic,
    #[error("truncated weight stream")]
    TruncatedStream,
    #[error("unsupported weight dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("weight name is not UTF-8")]
    BadName,
    #[error("duplicate weight `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightData {
    F32(Vec<f32>),
    F16(Vec<u16>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: WeightData,
}

impl WeightTensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        WeightTensor { shape, data: WeightData::F32(data) }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            WeightData::F32(_) => DType::F32,
            WeightData::F16(_) => DType::F16,
            WeightData::I64(_) => DType::I64,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            WeightData::F32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub tensors: IndexMap<String, WeightTensor>,
}

impl WeightStore {
    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: &str, t: WeightTensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            match &t.data {
                WeightData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                WeightData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                WeightData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<WeightStore, WeightError> {
        if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(WeightError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let mut store = WeightStore::default();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| WeightError::BadName)?.to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(WeightError::UnsupportedDtype(code))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(WeightError::TruncatedStream)?;
            let data = match dtype {
                DType::F32 => WeightData::F32(
                    r.take(count.checked_mul(4).ok_or(WeightError::TruncatedStream)?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F16 => WeightData::F16(
                    r.take(count.checked_mul(2).ok_or(WeightError::TruncatedStream)?)?
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                        .collect(),
                ),
                DType::I64 => WeightData::I64(
                    r.take(count.checked_mul(8).ok_or(WeightError::TruncatedStream)?)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(WeightError::UnsupportedDtype(other.code())),
            };
            if store.tensors.contains_key(&name) {
                return Err(WeightError::Duplicate(name));
            }
            store.tensors.insert(name, WeightTensor { shape, data });
        }
        Ok(store)
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let end = self.pos.checked_add(n).ok_or(WeightError::TruncatedStream)?;
        if end > self.buf.len() {
            return Err(WeightError::TruncatedStream);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let mut s = WeightStore::default();
        s.insert("w", WeightTensor::f32(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]));
        s.insert("i", WeightTensor { shape: vec![2], data: WeightData::I64(vec![-1, 5]) });
        s.insert("h", WeightTensor { shape: vec![1], data: WeightData::F16(vec![0x3C00]) });
        let bytes = s.to_bytes();
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), s);
        assert_eq!(WeightStore::from_bytes(&bytes[..bytes.len() - 1]), Err(WeightError::TruncatedStream));
        assert_eq!(WeightStore::from_bytes(b"LGQ1"), Err(WeightError::BadMagic));
        assert_eq!(WeightStore::from_bytes(b"LGW1").unwrap().tensors.len(), 0);
    }
}
