//! Pixelwise mean and spread over repeated masked reconstructions.

use crate::amss::MaskDraw;
use crate::metrics::Gray;
use crate::net::{self, ModelParams};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_PASSES: usize = 32;
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    /// `[h, w]` mean magnitude.
    pub mean: Tensor<f32>,
    /// `[h, w]` population standard deviation of the magnitude.
    pub std: Tensor<f32>,
    pub t: usize,
    pub seed: u64,
}

/// Runs `t` passes over one `[h, w, c]` input. Pass `k` draws its masks
/// from `(seed, k)`, so the result does not depend on how passes are
/// batched. With `masking` off every pass is identical.
pub fn mc_uncertainty(x_u: &Tensor<f32>, model: &ModelParams<f32>, t: usize, seed: u64, masking: bool) -> Result<UncertaintyMap> {
    let s = x_u.shape();
    if t == 0 || s.len() != 3 {
        return Err(TensorError::Invalid {
            op: "mc_uncertainty",
            msg: format!("need t >= 1 and a [h, w, c] input, got t = {t} and {s:?}"),
        });
    }
    let (h, w) = (s[0], s[1]);
    let mut passes: Vec<Vec<f64>> = Vec::with_capacity(t);
    for start in (0..t).step_by(CHUNK) {
        let n = CHUNK.min(t - start);
        let mut data = Vec::with_capacity(n * x_u.len());
        for _ in 0..n {
            data.extend_from_slice(x_u.data());
        }
        let batch = Tensor::new(&[n, h, w, s[2]], data)?;
        let mut draws: Vec<Vec<MaskDraw>> = vec![Vec::with_capacity(n); model.cfg.n_blocks()];
        for k in start..start + n {
            for (b, d) in net::draw_masks(&model.cfg, seed, k as u64, &[0], masking).into_iter().enumerate() {
                draws[b].extend(d);
            }
        }
        let y = model.run(&batch, &draws)?;
        for img in y.data().chunks_exact(x_u.len()) {
            let t = Tensor::new(s, img.to_vec())?;
            passes.push(Gray::from_tensor(&t)?.data);
        }
    }
    // accumulate deviations from the first pass: identical passes then give
    // an exact zero spread, and the sums stay small
    let first = passes[0].clone();
    let (mut shift, mut var) = (vec![0.0f64; h * w], vec![0.0f64; h * w]);
    for p in &passes {
        for ((m, v), f) in shift.iter_mut().zip(p).zip(&first) {
            *m += v - f;
        }
    }
    shift.iter_mut().for_each(|m| *m /= t as f64);
    for p in &passes {
        for (((acc, m), v), f) in var.iter_mut().zip(&shift).zip(p).zip(&first) {
            let d = v - f - m;
            *acc += d * d;
        }
    }
    let mean: Vec<f64> = first.iter().zip(&shift).map(|(f, m)| f + m).collect();
    let std = var.iter().map(|v| (v / t as f64).sqrt() as f32).collect();
    Ok(UncertaintyMap {
        mean: Tensor::new(&[h, w], mean.iter().map(|&m| m as f32).collect())?,
        std: Tensor::new(&[h, w], std)?,
        t,
        seed,
    })
}
