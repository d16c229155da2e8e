//! Single-coil Cartesian MRI: `y = M F x + n` with an orthonormal 2-D FFT
//! and a line mask `M` along the column (phase-encode) axis.

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::fft;
use crate::rng;
use crate::tensor::{is_pow2, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MriSamplingSpec {
    /// One flag per k-space column, in natural FFT order (DC at index 0).
    pub mask: Vec<bool>,
    pub af: usize,
    pub acs: usize,
    pub seed: u64,
}

/// FFT-order index of centred line `k` (DC at `w/2` in centred order).
pub fn centered_to_fft(k: usize, w: usize) -> usize {
    (k + w - w / 2) % w
}

impl MriSamplingSpec {
    pub fn width(&self) -> usize {
        self.mask.len()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// FFT-order indices of the always-sampled centre block.
    pub fn acs_lines(&self) -> Vec<usize> {
        acs_lines(self.width(), self.acs)
    }

    pub fn fully_sampled(w: usize) -> Self {
        MriSamplingSpec {
            mask: vec![true; w],
            af: 1,
            acs: w,
            seed: 0,
        }
    }
}

fn acs_lines(w: usize, acs: usize) -> Vec<usize> {
    let start = w / 2 - acs / 2;
    (start..start + acs).map(|k| centered_to_fft(k, w)).collect()
}

/// `ceil(W / af)` lines: `max(2, round(acs_fraction * W))` centre lines plus
/// the remainder drawn uniformly without replacement.
pub fn make_cartesian_mask(w: usize, af: usize, acs_fraction: f64, seed: u64) -> Result<MriSamplingSpec> {
    if af == 0 || w == 0 {
        return Err(TensorError::Invalid {
            op: "make_cartesian_mask",
            msg: format!("width {w} and acceleration {af} must be positive"),
        });
    }
    let total = w.div_ceil(af);
    if af == 1 {
        return Ok(MriSamplingSpec {
            mask: vec![true; w],
            af,
            acs: w,
            seed,
        });
    }
    let acs = ((acs_fraction * w as f64).round() as usize).max(2);
    if total < acs || acs > w {
        return Err(TensorError::Invalid {
            op: "make_cartesian_mask",
            msg: format!("acceleration {af} leaves {total} lines, fewer than the {acs} centre lines"),
        });
    }
    let mut mask = vec![false; w];
    for i in acs_lines(w, acs) {
        mask[i] = true;
    }
    let rest: Vec<usize> = (0..w).filter(|&i| !mask[i]).collect();
    let mut r = rng::keyed(seed, &[rng::domain::DATA, 0x4D41_534B]);
    for k in index::sample(&mut r, rest.len(), total - acs) {
        mask[rest[k]] = true;
    }
    Ok(MriSamplingSpec { mask, af, acs, seed })
}

fn check_image<T: Scalar>(x: &Tensor<T>, spec: &MriSamplingSpec) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(TensorError::Invalid {
            op: "mri",
            msg: format!("expected complex image [h, w, 2], got {s:?}"),
        });
    }
    let (h, w) = (s[0], s[1]);
    if !is_pow2(h) || !is_pow2(w) {
        return Err(TensorError::NotPowerOfTwo { h, w });
    }
    if spec.width() != w {
        return Err(TensorError::ShapeMismatch {
            op: "mri",
            lhs: s.to_vec(),
            rhs: vec![spec.width()],
        });
    }
    Ok((h, w))
}

fn apply_mask<T: Scalar>(d: &mut [T], h: usize, w: usize, mask: &[bool]) {
    for r in 0..h {
        for (c, &keep) in mask.iter().enumerate() {
            if !keep {
                d[2 * (r * w + c)] = T::zero();
                d[2 * (r * w + c) + 1] = T::zero();
            }
        }
    }
}

/// Masked k-space of a `[h, w, 2]` image with i.i.d. Gaussian noise of
/// standard deviation `noise_sigma` on the sampled entries.
pub fn mri_forward<T: Scalar>(x: &Tensor<T>, spec: &MriSamplingSpec, noise_sigma: f64, noise_seed: u64) -> Result<Tensor<T>> {
    let (h, w) = check_image(x, spec)?;
    let mut d = x.data().to_vec();
    fft::fft2_pairs(&mut d, h, w, false);
    apply_mask(&mut d, h, w, &spec.mask);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| TensorError::Invalid {
            op: "mri_forward",
            msg: e.to_string(),
        })?;
        let mut r = rng::keyed(noise_seed, &[rng::domain::NOISE]);
        for row in 0..h {
            for (c, &keep) in spec.mask.iter().enumerate() {
                if keep {
                    for k in 0..2 {
                        let i = 2 * (row * w + c) + k;
                        d[i] = d[i] + T::of(normal.sample(&mut r));
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), d)
}

/// Zero-filled reconstruction `F^{-1} M y` (the adjoint of the noiseless
/// forward operator).
pub fn mri_zero_fill<T: Scalar>(y: &Tensor<T>, spec: &MriSamplingSpec) -> Result<Tensor<T>> {
    let (h, w) = check_image(y, spec)?;
    let mut d = y.data().to_vec();
    apply_mask(&mut d, h, w, &spec.mask);
    fft::fft2_pairs(&mut d, h, w, true);
    Tensor::new(y.shape(), d)
}

/// Embeds a real `[h, w]` image as `[h, w, 2]` with zero imaginary part.
pub fn to_complex<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let data = x.data().iter().flat_map(|&v| [v, T::zero()]).collect();
    Tensor::new(&[s[0], s[1], 2], data).expect("2x elements")
}

/// `|z|` of every pair of a `[.., 2]` tensor.
pub fn magnitude<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let data = x.data().chunks_exact(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
    Tensor::new(&s[..s.len() - 1], data).expect("half elements")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        let m = make_cartesian_mask(64, 8, 0.04, 1).unwrap();
        assert_eq!(m.count(), 8);
        assert_eq!(m.acs, 3);
        assert!(m.acs_lines().iter().all(|&i| m.mask[i]));
        // DC is among the centre lines
        assert!(m.acs_lines().contains(&0));
    }

    #[test]
    fn af_one_samples_everything() {
        let m = make_cartesian_mask(32, 1, 0.04, 0).unwrap();
        assert!(m.mask.iter().all(|&b| b));
    }

    #[test]
    fn mask_reproducible() {
        assert_eq!(make_cartesian_mask(64, 4, 0.08, 9).unwrap(), make_cartesian_mask(64, 4, 0.08, 9).unwrap());
    }

    #[test]
    fn too_much_acceleration_rejected() {
        assert!(make_cartesian_mask(32, 16, 0.25, 0).is_err());
    }

    #[test]
    fn zero_image_zero_measurement() {
        let spec = make_cartesian_mask(16, 4, 0.1, 0).unwrap();
        let y = mri_forward(&Tensor::<f64>::zeros(&[16, 16, 2]), &spec, 0.0, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_only_on_sampled_lines() {
        let spec = make_cartesian_mask(16, 4, 0.1, 0).unwrap();
        let y = mri_forward(&Tensor::<f64>::zeros(&[16, 16, 2]), &spec, 0.1, 5).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let v = y.data()[2 * (r * 16 + c)];
                assert_eq!(v != 0.0, spec.mask[c]);
            }
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let spec = make_cartesian_mask(16, 4, 0.1, 0).unwrap();
        assert!(mri_forward(&Tensor::<f64>::zeros(&[16, 32, 2]), &spec, 0.0, 0).is_err());
        assert!(mri_forward(&Tensor::<f64>::zeros(&[12, 16, 2]), &spec, 0.0, 0).is_err());
    }
}
