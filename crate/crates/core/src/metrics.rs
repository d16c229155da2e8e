//! PSNR and SSIM on the `[0, 1]` intensity scale.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// A grey image in 64-bit for metric computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Gray {
    /// Accepts `[h, w]`, `[h, w, 1]`, or a complex `[h, w, 2]` (magnitude).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let d = t.data();
        let data = match s {
            [_, _] | [_, _, 1] => d.iter().map(|v| v.f64()).collect(),
            [_, _, 2] => d.chunks_exact(2).map(|p| p[0].f64().hypot(p[1].f64())).collect(),
            _ => {
                return Err(TensorError::Invalid {
                    op: "metrics",
                    msg: format!("expected [h, w], [h, w, 1] or [h, w, 2], got {s:?}"),
                })
            }
        };
        Ok(Gray { h: s[0], w: s[1], data })
    }
}

fn same_size(a: &Gray, b: &Gray) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(TensorError::ShapeMismatch {
            op: "metrics",
            lhs: vec![a.h, a.w],
            rhs: vec![b.h, b.w],
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(pred: &Gray, reference: &Gray) -> Result<f64> {
    same_size(pred, reference)?;
    let mse = pred.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalised Gaussian window.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian-window positions (sigma 1.5,
/// K1 0.01, K2 0.03, data range 1).
pub fn ssim(pred: &Gray, reference: &Gray) -> Result<f64> {
    same_size(pred, reference)?;
    let (h, w) = (pred.h, pred.w);
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(TensorError::Invalid {
            op: "ssim",
            msg: format!("image {h}x{w} smaller than the {SSIM_WIN}x{SSIM_WIN} window"),
        });
    }
    let g = gaussian_window();
    let (x, y) = (&pred.data, &reference.data);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&prod(x, x), h, w, &g);
    let syy = filter_valid(&prod(y, y), h, w, &g);
    let sxy = filter_valid(&prod(x, y), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `(psnr, ssim)` per image.
    pub per_image: Vec<(f64, f64)>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl MetricsReport {
    pub fn from_pairs(per_image: Vec<(f64, f64)>) -> Self {
        let (psnr_mean, psnr_std) = mean_std(&per_image.iter().map(|p| p.0).collect::<Vec<_>>());
        let (ssim_mean, ssim_std) = mean_std(&per_image.iter().map(|p| p.1).collect::<Vec<_>>());
        MetricsReport {
            per_image,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        }
    }
}

pub fn compute_metrics<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<MetricsReport> {
    compute_metrics_batch(std::slice::from_ref(pred), std::slice::from_ref(reference))
}

pub fn compute_metrics_batch<T: Scalar>(preds: &[Tensor<T>], refs: &[Tensor<T>]) -> Result<MetricsReport> {
    if preds.len() != refs.len() {
        return Err(TensorError::Invalid {
            op: "metrics",
            msg: format!("{} predictions for {} references", preds.len(), refs.len()),
        });
    }
    let mut out = Vec::with_capacity(preds.len());
    for (p, r) in preds.iter().zip(refs) {
        let (p, r) = (Gray::from_tensor(p)?, Gray::from_tensor(r)?);
        out.push((psnr(&p, &r)?, ssim(&p, &r)?));
    }
    Ok(MetricsReport::from_pairs(out))
}
