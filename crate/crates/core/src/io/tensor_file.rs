//! The `MMIR` tensor container: magic `MMIR`, version 1, dtype (0 = f32),
//! ndim, a reserved zero byte, `ndim` little-endian u32 extents, then the
//! row-major little-endian payload.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MMIR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER: usize = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file too short for a header ({0} bytes)")]
    ShortHeader(usize),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unsupported dtype {0}")]
    Dtype(u8),
    #[error("reserved byte is {0}, expected 0")]
    Reserved(u8),
    #[error("tensor must have at least one dimension")]
    NoDims,
    #[error("extent {axis} is zero")]
    ZeroExtent { axis: usize },
    #[error("shape {0:?} overflows")]
    Overflow(Vec<usize>),
    #[error("payload is {got} bytes, shape needs {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("{0} dimensions exceed the format limit of 255")]
    TooManyDims(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>, FormatError> {
    let s = t.shape();
    if s.len() > 255 {
        return Err(FormatError::TooManyDims(s.len()));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * s.len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, s.len() as u8, 0]);
    for &e in s {
        let e = u32::try_from(e).map_err(|_| FormatError::Overflow(s.to_vec()))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a complete buffer. Every header field and the exact payload
/// length are checked before any allocation proportional to the shape.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    if bytes.len() < HEADER {
        return Err(FormatError::ShortHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let (version, dtype, ndim, reserved) = (bytes[4], bytes[5], bytes[6] as usize, bytes[7]);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    if dtype != DTYPE_F32 {
        return Err(FormatError::Dtype(dtype));
    }
    if reserved != 0 {
        return Err(FormatError::Reserved(reserved));
    }
    if ndim == 0 {
        return Err(FormatError::NoDims);
    }
    let dims_end = HEADER + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(FormatError::ShortHeader(bytes.len()));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(FormatError::ZeroExtent { axis });
    }
    let expected = shape
        .iter()
        .try_fold(4usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| FormatError::Overflow(shape.clone()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(FormatError::PayloadLength {
            expected,
            got: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&shape, data).expect("length checked"))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<(), FormatError> {
    super::write_atomic(path, &encode(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>, FormatError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -0.5]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..8], &[b'M', b'M', b'I', b'R', 1, 0, 2, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::new(&[3], vec![f32::NAN, -0.0, f32::MIN_POSITIVE]).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.shape(), &[3]);
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(&Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap()).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(FormatError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode(&b), Err(FormatError::Version(2))));
        let mut b = good.clone();
        b[5] = 1;
        assert!(matches!(decode(&b), Err(FormatError::Dtype(1))));
        let mut b = good.clone();
        b[7] = 9;
        assert!(matches!(decode(&b), Err(FormatError::Reserved(9))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(FormatError::PayloadLength { .. })));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode(&b), Err(FormatError::PayloadLength { .. })));
        assert!(matches!(decode(&good[..5]), Err(FormatError::ShortHeader(5))));
    }

    #[test]
    fn huge_shape_does_not_allocate() {
        let mut b = vec![b'M', b'M', b'I', b'R', 1, 0, 3, 0];
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&b).is_err());
    }
}
