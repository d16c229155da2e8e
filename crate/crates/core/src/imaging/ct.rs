//! Fan-beam CT on a flat equispaced detector: Joseph ray-driven projection,
//! its exact adjoint, and filtered backprojection.
//!
//! Coordinates are in pixel units with the origin at the image centre, x to
//! the right and y up. View `i` places the source at
//! `sc * (cos b, sin b)`, `b = 2 pi i / n_views`, with the detector axis
//! `(-sin b, cos b)` at distance `sdd` from the source.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use crate::autodiff::LinearOperator;
use crate::fft;
use crate::rng;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct CtGeometry {
    pub n_views: usize,
    pub n_detectors: usize,
    /// Source to rotation centre, in length units.
    pub source_to_center: f64,
    /// Source to detector plane, in length units.
    pub source_to_detector: f64,
    /// Detector cell spacing on the detector plane, in length units.
    pub detector_pitch: f64,
    pub image_size: usize,
    pub pixel_pitch: f64,
}

impl CtGeometry {
    /// Geometry with a detector pitch wide enough to see the whole image
    /// (5% margin) from every view.
    pub fn covering(image_size: usize, n_views: usize, n_detectors: usize, sc: f64, sdd: f64, pixel_pitch: f64) -> Self {
        let half_diag = image_size as f64 * pixel_pitch * std::f64::consts::FRAC_1_SQRT_2;
        let fan = (half_diag / sc).clamp(-1.0, 1.0).asin();
        let half_width = 1.05 * sdd * fan.tan();
        CtGeometry {
            n_views,
            n_detectors,
            source_to_center: sc,
            source_to_detector: sdd,
            detector_pitch: 2.0 * half_width / n_detectors as f64,
            image_size,
            pixel_pitch,
        }
    }

    /// `size x size` image, 96 detectors, source at `2 size`, detector at
    /// `4 size` pixel pitches.
    pub fn desk(size: usize, n_views: usize) -> Self {
        let s = size as f64;
        Self::covering(size, n_views, 96, 2.0 * s, 4.0 * s, 1.0)
    }

    /// 512 x 512 at 1 mm, 736 detectors, 512 mm / 1000 mm distances.
    pub fn full_scale(n_views: usize) -> Self {
        Self::covering(512, n_views, 736, 512.0, 1000.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let half_diag = self.image_size as f64 * self.pixel_pitch * std::f64::consts::FRAC_1_SQRT_2;
        let ok = self.n_views > 0
            && self.n_detectors > 0
            && self.image_size > 0
            && self.pixel_pitch > 0.0
            && self.detector_pitch > 0.0
            && self.source_to_detector > self.source_to_center
            && self.source_to_center > half_diag;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "ct_geometry",
                msg: format!("need sdd > sc > image half-diagonal ({half_diag:.2}) and positive extents: {self:?}"),
            })
        }
    }

    pub fn angle(&self, view: usize) -> f64 {
        2.0 * PI * view as f64 / self.n_views as f64
    }

    pub fn sino_shape(&self) -> [usize; 2] {
        [self.n_views, self.n_detectors]
    }

    /// Same geometry keeping every `stride`-th view.
    pub fn subsample(&self, stride: usize) -> Self {
        CtGeometry {
            n_views: self.n_views.div_ceil(stride.max(1)),
            ..self.clone()
        }
    }

    fn sc_px(&self) -> f64 {
        self.source_to_center / self.pixel_pitch
    }

    fn sdd_px(&self) -> f64 {
        self.source_to_detector / self.pixel_pitch
    }

    fn pitch_px(&self) -> f64 {
        self.detector_pitch / self.pixel_pitch
    }

    /// Detector offset of cell `k` from the central ray, in pixel units.
    fn cell_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.pitch_px()
    }

    /// Source and detector cell centre of ray `(view, cell)`.
    fn ray(&self, view: usize, cell: usize) -> ([f64; 2], [f64; 2]) {
        let (sb, cb) = self.angle(view).sin_cos();
        let sc = self.sc_px();
        let dc = sc - self.sdd_px();
        let t = self.cell_offset(cell);
        ([sc * cb, sc * sb], [dc * cb - t * sb, dc * sb + t * cb])
    }

    /// Visits the Joseph interpolation weights of one ray: `f(pixel, w)`.
    fn trace(&self, view: usize, cell: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.image_size;
        let half = (n as f64 - 1.0) / 2.0;
        let (s, d) = self.ray(view, cell);
        let (dx, dy) = (d[0] - s[0], d[1] - s[1]);
        let len = dx.hypot(dy);
        let x_major = dx.abs() >= dy.abs();
        let (major, minor) = if x_major { (dx, dy) } else { (dy, dx) };
        let (s_major, s_minor) = if x_major { (s[0], s[1]) } else { (s[1], s[0]) };
        let step = len / major.abs() * self.pixel_pitch;
        for i in 0..n {
            // major-axis coordinate of line i; x grows with column, y shrinks with row
            let m = if x_major { i as f64 - half } else { half - i as f64 };
            let t = (m - s_major) / major;
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let q = s_minor + t * minor;
            // fractional index along the minor axis
            let fi = if x_major { half - q } else { q + half };
            let j0 = fi.floor();
            let w1 = fi - j0;
            let j0 = j0 as isize;
            for (j, w) in [(j0, 1.0 - w1), (j0 + 1, w1)] {
                if j < 0 || j >= n as isize || w == 0.0 {
                    continue;
                }
                let j = j as usize;
                let pix = if x_major { j * n + i } else { i * n + j };
                f(pix, w * step);
            }
        }
    }

    fn check_image<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.image_size;
        if x.len() != n * n || !(x.shape() == [n, n] || x.shape() == [n, n, 1]) {
            return Err(TensorError::ShapeMismatch {
                op: "radon",
                lhs: x.shape().to_vec(),
                rhs: vec![n, n],
            });
        }
        Ok(())
    }

    fn check_sino<T: Scalar>(&self, s: &Tensor<T>) -> Result<()> {
        if s.shape() != self.sino_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sinogram",
                lhs: s.shape().to_vec(),
                rhs: self.sino_shape().to_vec(),
            });
        }
        Ok(())
    }

    fn project_into<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let nd = self.n_detectors;
        for v in 0..self.n_views {
            for k in 0..nd {
                let mut acc = 0.0;
                self.trace(v, k, |p, w| acc += w * x[p].f64());
                out[v * nd + k] = T::of(acc);
            }
        }
    }

    fn backproject_into<T: Scalar>(&self, y: &[T], out: &mut [T]) {
        let mut acc = vec![0.0f64; out.len()];
        let nd = self.n_detectors;
        for v in 0..self.n_views {
            for k in 0..nd {
                let s = y[v * nd + k].f64();
                if s != 0.0 {
                    self.trace(v, k, |p, w| acc[p] += w * s);
                }
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = T::of(a);
        }
    }
}

/// Fan-beam line integrals of an `[n, n]` (or `[n, n, 1]`) image plus
/// Gaussian noise of std `noise_sigma`.
pub fn radon_forward<T: Scalar>(x: &Tensor<T>, geom: &CtGeometry, noise_sigma: f64, noise_seed: u64) -> Result<Tensor<T>> {
    geom.validate()?;
    geom.check_image(x)?;
    let mut out = vec![T::zero(); geom.n_views * geom.n_detectors];
    geom.project_into(x.data(), &mut out);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| TensorError::Invalid {
            op: "radon_forward",
            msg: e.to_string(),
        })?;
        let mut r = rng::keyed(noise_seed, &[rng::domain::NOISE, 0x4354]);
        for v in &mut out {
            *v = *v + T::of(normal.sample(&mut r));
        }
    }
    Tensor::new(&geom.sino_shape(), out)
}

/// Transpose of the noiseless [`radon_forward`]; returns `[n, n]`.
pub fn backproject<T: Scalar>(sino: &Tensor<T>, geom: &CtGeometry) -> Result<Tensor<T>> {
    geom.validate()?;
    geom.check_sino(sino)?;
    let n = geom.image_size;
    let mut out = vec![T::zero(); n * n];
    geom.backproject_into(sino.data(), &mut out);
    Tensor::new(&[n, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampWindow {
    RamLak,
    Hann,
}

/// Ramp filter frequency response for a zero-padded length `m`, built from
/// the band-limited spatial kernel so the DC term is not lost.
fn ramp_response(m: usize, tau: f64, window: RampWindow) -> Vec<f64> {
    let mut re = vec![0.0; m];
    let mut im = vec![0.0; m];
    for (i, r) in re.iter_mut().enumerate() {
        let n = if i <= m / 2 { i as isize } else { i as isize - m as isize };
        *r = if n == 0 {
            1.0 / (4.0 * tau * tau)
        } else if n % 2 != 0 {
            -1.0 / ((n * n) as f64 * PI * PI * tau * tau)
        } else {
            0.0
        };
    }
    fft::fft1d(&mut re, &mut im, false);
    re.iter()
        .enumerate()
        .map(|(k, &h)| {
            let f = if k <= m / 2 { k } else { m - k } as f64 / m as f64;
            let win = match window {
                RampWindow::RamLak => 1.0,
                RampWindow::Hann => 0.5 + 0.5 * (2.0 * PI * f).cos(),
            };
            h * tau * win
        })
        .collect()
}

/// Filtered backprojection for the flat-detector fan beam: cosine
/// weighting, ramp filtering per view, and `1/U^2`-weighted backprojection
/// scaled by `pi / n_views`. Returns `[n, n]`.
pub fn fbp<T: Scalar>(sino: &Tensor<T>, geom: &CtGeometry, window: RampWindow) -> Result<Tensor<T>> {
    geom.validate()?;
    geom.check_sino(sino)?;
    let (nv, nd, n) = (geom.n_views, geom.n_detectors, geom.image_size);
    let d = geom.sc_px();
    // detector rescaled to a virtual line through the rotation centre
    let mag = geom.sc_px() / geom.sdd_px();
    let tau = geom.pitch_px() * mag;
    let m = (2 * nd).next_power_of_two();
    let h = ramp_response(m, tau, window);
    let mut filtered = vec![0.0f64; nv * nd];
    for v in 0..nv {
        let mut re = vec![0.0; m];
        let mut im = vec![0.0; m];
        for k in 0..nd {
            let p = geom.cell_offset(k) * mag;
            re[k] = sino.data()[v * nd + k].f64() * d / (d * d + p * p).sqrt();
        }
        fft::fft1d(&mut re, &mut im, false);
        for k in 0..m {
            re[k] *= h[k];
            im[k] *= h[k];
        }
        fft::fft1d(&mut re, &mut im, true);
        for k in 0..nd {
            filtered[v * nd + k] = re[k] / m as f64;
        }
    }
    let half = (n as f64 - 1.0) / 2.0;
    let centre = (nd as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f64; n * n];
    for v in 0..nv {
        let (sb, cb) = geom.angle(v).sin_cos();
        let q = &filtered[v * nd..(v + 1) * nd];
        for r in 0..n {
            let y = half - r as f64;
            for c in 0..n {
                let x = c as f64 - half;
                let s = x * cb + y * sb;
                let t = -x * sb + y * cb;
                let u = (d - s) / d;
                let p = t / u;
                let fk = p / tau + centre;
                let k0 = fk.floor();
                if k0 < 0.0 || k0 + 1.0 > (nd - 1) as f64 {
                    continue;
                }
                let w = fk - k0;
                let k0 = k0 as usize;
                out[r * n + c] += ((1.0 - w) * q[k0] + w * q[k0 + 1]) / (u * u);
            }
        }
    }
    let scale = PI / nv as f64;
    Tensor::new(&[n, n], out.into_iter().map(|v| T::of(v * scale)).collect())
}

/// The projector as a tape operator on `[n, n, 1]` images.
#[derive(Clone, Debug)]
pub struct RadonOperator {
    pub geom: CtGeometry,
}

impl RadonOperator {
    pub fn new(geom: CtGeometry) -> Result<Self> {
        geom.validate()?;
        Ok(RadonOperator { geom })
    }
}

impl<T: Scalar> LinearOperator<T> for RadonOperator {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.geom.image_size, self.geom.image_size, 1]
    }

    fn out_shape(&self) -> Vec<usize> {
        self.geom.sino_shape().to_vec()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        self.geom.project_into(x, out);
    }

    fn adjoint(&self, y: &[T], out: &mut [T]) {
        self.geom.backproject_into(y, out);
    }
}
