//! `.tns` tensor container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size        | field                                  |
//! |-------------|-------------|----------------------------------------|
//! | 0           | 4           | magic `b"TNSR"`                        |
//! | 4           | 4           | format version, `u32`, currently 1     |
//! | 8           | 4           | dtype, `u32`: 1 = f32, 2 = f64         |
//! | 12          | 4           | rank, `u32`, at most 4                 |
//! | 16          | 8 * rank    | dims, `u64` each                       |
//! | 16 + 8*rank | n * size    | payload, row-major, IEEE-754 LE values |
//!
//! `n` is the product of the dims (1 for rank 0). Files carry no padding,
//! compression or trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense row-major array held in f64 regardless of on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            )));
        }
        Ok(TensorData { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        TensorData {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn encode(t: &TensorData, dtype: DType) -> Result<Vec<u8>> {
    if t.dims.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank {} exceeds the supported maximum of {MAX_RANK}",
            t.dims.len()
        )));
    }
    let n: usize = t.dims.iter().product();
    if n != t.data.len() {
        return Err(Error::Shape(format!(
            "dims {:?} do not match {} values",
            t.dims,
            t.data.len()
        )));
    }
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value at flat index {i}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.dims.len() + n * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated header reading {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<(TensorData, DType)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"TNSR\""));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = read_u32(bytes, 8, "dtype")?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(8, format!("unknown dtype code {code}")))?;
    let rank = read_u32(bytes, 12, "rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(12, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut n: u64 = 1;
    for i in 0..rank {
        let off = HEADER_LEN + 8 * i;
        let d = bytes
            .get(off..off + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(off as u64, "truncated dims"))?;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::format(off as u64, "dims overflow"))?;
        dims.push(d as usize);
    }
    let start = HEADER_LEN + 8 * rank;
    let payload = &bytes[start.min(bytes.len())..];
    let expected = n
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| Error::format(start as u64, "payload size overflow"))?;
    if (payload.len() as u64) < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if (payload.len() as u64) > expected {
        return Err(Error::format(
            start as u64 + expected,
            format!("{} trailing bytes after payload", payload.len() as u64 - expected),
        ));
    }
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((TensorData { dims, data }, dtype))
}

pub fn write(path: impl AsRef<Path>, t: &TensorData, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f64(path: impl AsRef<Path>, dims: &[usize], data: &[f64]) -> Result<()> {
    write(
        path,
        &TensorData::new(dims.to_vec(), data.to_vec())?,
        DType::F64,
    )
}

pub fn read(path: impl AsRef<Path>) -> Result<TensorData> {
    read_with_dtype(path).map(|(t, _)| t)
}

pub fn read_with_dtype(path: impl AsRef<Path>) -> Result<(TensorData, DType)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn empty_array_has_zero_dim() {
        let t = TensorData::new(vec![0], vec![]).unwrap();
        let bytes = encode(&t, DType::F64).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        let (back, dtype) = decode(&bytes).unwrap();
        assert_eq!(back.dims, vec![0]);
        assert!(back.data.is_empty());
        assert_eq!(dtype, DType::F64);
    }

    #[test]
    fn random_f64_3_tensor_round_trips_bit_exact() {
        let mut rng = SplitMix64::new(11);
        let data: Vec<f64> = (0..3 * 5 * 7).map(|_| rng.normal() * 1e3).collect();
        let t = TensorData::new(vec![3, 5, 7], data).unwrap();
        let (back, _) = decode(&encode(&t, DType::F64).unwrap()).unwrap();
        assert_eq!(back.dims, t.dims);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_payload_is_half_size() {
        let t = TensorData::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let bytes = encode(&t, DType::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 16 + 16);
        let (back, dtype) = decode(&bytes).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = TensorData::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t, DType::F64).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len() as u64 - 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let t = TensorData::new(vec![1], vec![1.0]).unwrap();
        let good = encode(&t, DType::F64).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Format { offset: 4, .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 7;
        assert!(matches!(decode(&bad_dtype), Err(Error::Format { offset: 8, .. })));

        let mut bad_rank = good.clone();
        bad_rank[12] = 9;
        assert!(matches!(decode(&bad_rank), Err(Error::Format { offset: 12, .. })));

        assert!(matches!(decode(&good[..10]), Err(Error::Format { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_finite_and_high_rank() {
        let t = TensorData::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(encode(&t, DType::F64), Err(Error::Domain(_))));
        let t = TensorData::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(encode(&t, DType::F64), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(
            dims in proptest::collection::vec(0usize..5, 0..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.next_u64() >> 2)).collect();
            let t = TensorData::new(dims, data).unwrap();
            let (back, _) = decode(&encode(&t, DType::F64).unwrap()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
