//! Binary tensor container.
//!
//! Byte layout, all integers little-endian:
//!
//! | field   | size          |
//! |---------|---------------|
//! | magic   | 4 (`STPG`)    |
//! | version | u16           |
//! | dtype   | u8            |
//! | ndim    | u8            |
//! | dims    | u64 × ndim    |
//! | payload | row-major     |
//! | crc32   | u32 of payload|

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"STPG";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
    U16 = 4,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            4 => Some(DType::U16),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor".into(),
                detail: format!("dims {dims:?} need {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_real<T: Real>(dims: Vec<usize>, values: &[T]) -> Result<Self> {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => TensorData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self::new(dims, data)
    }

    /// Converts floating payloads to `T`. Integer payloads are rejected.
    pub fn to_real<T: Real>(&self) -> Result<Vec<T>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| T::lit(x as f64)).collect()),
            TensorData::F64(v) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            other => Err(Error::invalid(format!(
                "expected floating tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * self.data.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype() as u8, self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let payload = self.payload_bytes();
        let mut hasher = crc32fast::Hasher::new();
        // stream the payload in chunks so the crc and the write share one pass
        for chunk in payload.chunks(1 << 16) {
            hasher.update(chunk);
            w.write_all(chunk)?;
        }
        w.write_all(&hasher.finalize().to_le_bytes())
    }

    /// Parses a container from memory; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| Error::Truncated {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 8 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(Error::BadMagic(path.to_path_buf()));
            }
            return Err(truncated("header shorter than 8 bytes"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let dtype = DType::from_code(bytes[6]).ok_or(Error::UnknownDType {
            path: path.to_path_buf(),
            code: bytes[6],
        })?;
        let ndim = bytes[7] as usize;
        let header = 8 + 8 * ndim;
        if bytes.len() < header + 4 {
            return Err(truncated("missing dims or crc"));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = 8 + 8 * i;
                u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
            })
            .collect();
        let expected = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| truncated("dims overflow"))?;
        let payload = &bytes[header..bytes.len() - 4];
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Crc {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    tensor.write_to(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn flipped_payload_byte_is_a_crc_error() {
        let t = Tensor::new(vec![2, 2], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut bytes = t.to_bytes();
        let header = 8 + 16;
        bytes[header + 5] ^= 0x40;
        assert!(matches!(Tensor::from_bytes(&bytes, p()), Err(Error::Crc { .. })));
    }

    #[test]
    fn short_payload_is_a_length_error() {
        // dims (2,3) but only five f32 values in the payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&[DType::F32 as u8, 2]);
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        let payload: Vec<u8> = (0..5).flat_map(|i| (i as f32).to_le_bytes()).collect();
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        match Tensor::from_bytes(&bytes, p()) {
            Err(Error::PayloadLength { expected, found, .. }) => {
                assert_eq!((expected, found), (24, 20));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_corruptions_are_distinct() {
        let t = Tensor::new(vec![3], TensorData::U16(vec![1, 2, 3])).unwrap();
        let good = t.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad, p()), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            Tensor::from_bytes(&bad, p()),
            Err(Error::UnsupportedVersion { version: 9, .. })
        ));

        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(
            Tensor::from_bytes(&bad, p()),
            Err(Error::UnknownDType { code: 7, .. })
        ));

        assert!(matches!(
            Tensor::from_bytes(&good[..10], p()),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stpg");
        let t = Tensor::new(vec![2, 1, 2], TensorData::F64(vec![0.1, -2.5, f64::MAX, 1e-300])).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(matches!(
            read_tensor(dir.path().join("missing.stpg")),
            Err(Error::MissingFile(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<u64>(), 0..64)) {
            let data: Vec<f64> = values.iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(vec![data.len()], TensorData::F64(data.clone())).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), p()).unwrap();
            match back.data {
                TensorData::F64(v) => {
                    let a: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
                    prop_assert_eq!(a, values);
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn u8_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u8>()) {
            let n: usize = dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let t = Tensor::new(dims, TensorData::U8(data)).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes(), p()).unwrap(), t);
        }
    }
}
