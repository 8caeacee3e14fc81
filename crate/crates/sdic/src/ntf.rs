//! NTF: a minimal bit-exact tensor file format.
//!
//! Layout: magic `NTF1`; one dtype byte (1 = 32-bit float, 2 = 64-bit float);
//! one rank byte; two zero padding bytes; `rank` little-endian u32 dims;
//! row-major little-endian payload.

use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NTF1";

/// A tensor as read from disk, in either precision.
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    /// Widen (or pass through) to f64.
    pub fn to_f64(&self) -> ArrayD<f64> {
        match self {
            Tensor::F32(a) => a.mapv(|v| v as f64),
            Tensor::F64(a) => a.clone(),
        }
    }
}

/// Element types NTF can store.
pub trait NtfScalar: tapegrad::Scalar {
    const DTYPE: u8;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl NtfScalar for f32 {
    const DTYPE: u8 = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl NtfScalar for f64 {
    const DTYPE: u8 = 2;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

pub fn encode<S: NtfScalar>(a: &ArrayD<S>) -> Vec<u8> {
    let dims = a.shape();
    assert!(dims.len() <= u8::MAX as usize, "rank too large for NTF");
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + a.len() * std::mem::size_of::<S>());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE);
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
    }
    for v in a.iter() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fail = |m: &str| Error::Format(format!("NTF: {m}"));
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(fail("nonzero padding"));
    }
    let head = 8 + 4 * rank;
    if bytes.len() < head {
        return Err(fail("truncated dims"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[head..];
    let elem = match dtype {
        1 => 4,
        2 => 8,
        _ => return Err(fail("unknown dtype")),
    };
    if payload.len() != count * elem {
        return Err(fail("payload size mismatch"));
    }
    Ok(match dtype {
        1 => Tensor::F32(
            ArrayD::from_shape_vec(
                IxDyn(&dims),
                payload.chunks_exact(4).map(f32::read_le).collect(),
            )
            .unwrap(),
        ),
        _ => Tensor::F64(
            ArrayD::from_shape_vec(
                IxDyn(&dims),
                payload.chunks_exact(8).map(f64::read_le).collect(),
            )
            .unwrap(),
        ),
    })
}

pub fn write<S: NtfScalar>(path: &Path, a: &ArrayD<S>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(a))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32_and_f64() {
        let a32 = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, -2.5, 0.0, 3.25, 1e-7, 9.0])
            .unwrap();
        match decode(&encode(&a32)).unwrap() {
            Tensor::F32(b) => assert_eq!(a32, b),
            _ => panic!("dtype"),
        }
        let a64 =
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![std::f64::consts::PI, -0.0, 1e-300]).unwrap();
        match decode(&encode(&a64)).unwrap() {
            Tensor::F64(b) => {
                assert_eq!(a64.shape(), b.shape());
                for (x, y) in a64.iter().zip(b.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn header_layout() {
        let a = ArrayD::<f32>::zeros(IxDyn(&[4, 5]));
        let bytes = encode(&a);
        assert_eq!(&bytes[0..4], b"NTF1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 16 + 20 * 4);
    }

    #[test]
    fn scalar_rank_zero() {
        let a = ArrayD::from_elem(IxDyn(&[]), 7.5f64);
        match decode(&encode(&a)).unwrap() {
            Tensor::F64(b) => assert_eq!(a, b),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn corrupt_rejected() {
        let a = ArrayD::<f32>::zeros(IxDyn(&[2]));
        let mut bytes = encode(&a);
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut b2 = encode(&a);
        b2.truncate(b2.len() - 1);
        assert!(decode(&b2).is_err());
    }
}
