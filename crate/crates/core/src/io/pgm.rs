//! 8-bit binary PGM (P5) export with min-max scaling.

use std::path::Path;

use crate::metrics::Gray;
use crate::tensor::{Result, Scalar, Tensor};

/// Scales to `0..=255` by the image range; a constant image maps to 0.
pub fn encode_pgm<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let g = Gray::from_tensor(t)?;
    let lo = g.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", g.w, g.h).into_bytes();
    out.extend(g.data.iter().map(|&v| {
        if span > 0.0 && span.is_finite() {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm<T: Scalar>(path: &Path, t: &Tensor<T>) -> std::io::Result<()> {
    let bytes = encode_pgm(t).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    super::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let t = Tensor::new(&[1, 3], vec![-1.0f32, 0.0, 1.0]).unwrap();
        let b = encode_pgm(&t).unwrap();
        let head = b"P5\n3 1\n255\n";
        assert_eq!(&b[..head.len()], head);
        assert_eq!(&b[head.len()..], &[0, 128, 255]);
    }

    #[test]
    fn constant_image_is_constant() {
        let b = encode_pgm(&Tensor::full(&[2, 2], 0.7f32)).unwrap();
        assert!(b[b.len() - 4..].iter().all(|&v| v == 0));
    }
}
