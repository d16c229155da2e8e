//! Radix-2 FFTs on interleaved `(re, im)` pairs.
//!
//! Complex images are stored with a trailing pair axis, `[.., H, W, 2]`. All
//! two-dimensional transforms here are orthonormal (scaled by `1/sqrt(HW)`),
//! so the inverse transform is also the adjoint.

use crate::tensor::{is_pow2, Scalar};

/// In-place unnormalised 1-D FFT of length `re.len()` (a power of two).
/// `inverse` flips the sign of the exponent; no scaling is applied.
pub fn fft1d<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    debug_assert!(is_pow2(n));
    if n <= 1 {
        return;
    }
    // bit reversal
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        // twiddles computed in f64 so f32 transforms keep full precision
        let tw: Vec<(T, T)> = (0..half)
            .map(|k| {
                let a = ang * k as f64;
                (T::of(a.cos()), T::of(a.sin()))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in tw.iter().enumerate() {
                let a = start + k;
                let b = a + half;
                let xr = re[b] * wr - im[b] * wi;
                let xi = re[b] * wi + im[b] * wr;
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] = re[a] + xr;
                im[a] = im[a] + xi;
            }
        }
        len <<= 1;
    }
}

/// Orthonormal 2-D FFT of one `H x W` complex image stored as interleaved
/// pairs (`data.len() == 2*h*w`).
pub fn fft2_pairs<T: Scalar>(data: &mut [T], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), 2 * h * w);
    let mut re = vec![T::zero(); w.max(h)];
    let mut im = vec![T::zero(); w.max(h)];
    for r in 0..h {
        for c in 0..w {
            re[c] = data[2 * (r * w + c)];
            im[c] = data[2 * (r * w + c) + 1];
        }
        fft1d(&mut re[..w], &mut im[..w], inverse);
        for c in 0..w {
            data[2 * (r * w + c)] = re[c];
            data[2 * (r * w + c) + 1] = im[c];
        }
    }
    let scale = T::of(1.0 / ((h * w) as f64).sqrt());
    for c in 0..w {
        for r in 0..h {
            re[r] = data[2 * (r * w + c)];
            im[r] = data[2 * (r * w + c) + 1];
        }
        fft1d(&mut re[..h], &mut im[..h], inverse);
        for r in 0..h {
            data[2 * (r * w + c)] = re[r] * scale;
            data[2 * (r * w + c) + 1] = im[r] * scale;
        }
    }
}

/// Applies [`fft2_pairs`] to every image of a `[.., H, W, 2]` buffer.
pub fn fft2_batch<T: Scalar>(data: &mut [T], h: usize, w: usize, inverse: bool) {
    for img in data.chunks_exact_mut(2 * h * w) {
        fft2_pairs(img, h, w, inverse);
    }
}
