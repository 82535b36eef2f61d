//! STF1 raw tensor files.
//!
//! Layout: `b"STF1"`, dtype code (u8, 0 = f32, 1 = f64), rank (u8),
//! `rank` little-endian u64 extents, then the little-endian payload.
//! Several records may be concatenated in one file.

use std::io::{Read, Write};
use std::path::Path;

use super::scalar::{DType, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STF1";

/// A decoded record of either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to `T`, casting if the stored dtype differs.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", t.shape().len())))?;
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(rank);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn write<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(6 + 8 * t.shape().len() + T::DTYPE.width() * t.numel());
    encode(t, &mut buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&buf)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated STF1 record: {e}")))
}

/// Read one record; `Ok(None)` at a clean end of stream.
pub fn read(r: &mut impl Read) -> Result<Option<AnyTensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r
            .read(&mut magic[got..])
            .map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(Error::Format("truncated STF1 magic".into()))
            };
        }
        got += n;
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        read_exact(r, &mut e)?;
        shape.push(usize::try_from(u64::from_le_bytes(e)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.width()];
    read_exact(r, &mut payload)?;
    Ok(Some(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(&shape, &payload)?),
    }))
}

fn decode_payload<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let w = T::DTYPE.width();
    let data = payload.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn read_all(mut r: impl Read) -> Result<Vec<AnyTensor>> {
    let mut out = Vec::new();
    while let Some(t) = read(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[&Tensor<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        encode(t, &mut buf)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<AnyTensor>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_all(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        let mut expect = b"STF1".to_vec();
        expect.extend_from_slice(&[0, 2]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read(&mut &b"NOPE\x00\x01"[..]).is_err());
        assert!(read(&mut &b"STF1\x07\x01"[..]).is_err());
        assert!(read(&mut &b"STF1\x01\x01\x02\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_both_dtypes(shape in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
            let a = SeededRng::new(seed, 0).normal_tensor::<f64>(&shape, 1.0);
            let b: Tensor<f32> = a.cast();
            let mut buf = Vec::new();
            encode(&a, &mut buf).unwrap();
            encode(&b, &mut buf).unwrap();
            let back = read_all(&buf[..]).unwrap();
            prop_assert_eq!(back, vec![AnyTensor::F64(a), AnyTensor::F32(b)]);
        }
    }
}
