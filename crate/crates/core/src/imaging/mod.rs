//! Acquisition physics and synthetic data.

pub mod ct;
pub mod mri;
pub mod phantom;

use crate::tensor::{Result, Scalar, Tensor};

/// Ground truth, network input and raw measurement of one simulated scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulated<T> {
    /// `[h, w, c]`.
    pub x: Tensor<T>,
    /// `[h, w, c]`.
    pub x_u: Tensor<T>,
    /// k-space `[h, w, 2]` or sinogram `[views, detectors]`.
    pub y: Tensor<T>,
}

/// Scales a `[h, w]` image so its maximum is 1 (all-zero images unchanged).
pub fn normalize_max<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let m = x.max_abs();
    if m > T::zero() {
        x.map(|v| v / m)
    } else {
        x.clone()
    }
}

/// Real `[h, w]` image to `(x, x_u, y)` with `x` complex and `x_u` the
/// zero-filled reconstruction.
pub fn simulate_mri<T: Scalar>(img: &Tensor<T>, spec: &mri::MriSamplingSpec, sigma: f64, noise_seed: u64) -> Result<Simulated<T>> {
    let x = mri::to_complex(img);
    let y = mri::mri_forward(&x, spec, sigma, noise_seed)?;
    let x_u = mri::mri_zero_fill(&y, spec)?;
    Ok(Simulated { x, x_u, y })
}

/// Real `[n, n]` image to `(x, x_u, y)` with `x_u` the FBP of the sinogram
/// clipped to `[0, 1]`.
pub fn simulate_ct<T: Scalar>(img: &Tensor<T>, geom: &ct::CtGeometry, sigma: f64, noise_seed: u64) -> Result<Simulated<T>> {
    let n = geom.image_size;
    let y = ct::radon_forward(img, geom, sigma, noise_seed)?;
    let x_u = ct::fbp(&y, geom, ct::RampWindow::RamLak)?.map(|v| v.max(T::zero()).min(T::one()));
    Ok(Simulated {
        x: img.clone().reshape(&[n, n, 1])?,
        x_u: x_u.reshape(&[n, n, 1])?,
        y,
    })
}
