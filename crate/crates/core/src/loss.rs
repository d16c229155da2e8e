//! Training objectives: Charbonnier image and transform-domain terms, a
//! fixed random-feature perceptual term, and the adversarial BCE pair.

use std::sync::Arc;

use crate::autodiff::{Conv2dSpec, LinearOperator, Tape, Var};
use crate::imaging::ct::{CtGeometry, RadonOperator};
use crate::params::fan_in;
use crate::rng;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Mri,
    Ct,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Mri => 2,
            Modality::Ct => 1,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mri" => Ok(Modality::Mri),
            "ct" => Ok(Modality::Ct),
            _ => Err(format!("unknown modality {s:?} (mri | ct)")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Mri => "mri",
            Modality::Ct => "ct",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
    /// Per-pixel Charbonnier instead of one norm per sample.
    pub per_pixel: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 15.0,
            beta: 0.1,
            gamma: 0.0025,
            eta: 0.1,
            epsilon: 1e-9,
            per_pixel: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.eta];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(TensorError::Invalid {
                op: "loss_weights",
                msg: format!("weights must be finite and nonnegative: {self:?}"),
            });
        }
        Ok(())
    }
}

/// `sqrt(||a - b||^2 + eps^2)` per sample (leading axis), averaged over the
/// batch; with `per_pixel` the root is taken per element and averaged.
pub fn charbonnier<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, eps: f64, per_pixel: bool) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op: "charbonnier",
            lhs: sa,
            rhs: sb,
        });
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let r = if per_pixel {
        sq
    } else {
        let n = sa.iter().skip(1).product::<usize>();
        let flat = tape.reshape(sq, &[sa[0], n])?;
        tape.sum_axis(flat, 1)?
    };
    let r = tape.affine(r, T::one(), T::of(eps * eps));
    let r = tape.sqrt(r);
    Ok(tape.mean(r))
}

/// The transform `T` of the transform-domain term.
#[derive(Clone)]
pub enum Transform {
    /// Orthonormal 2-D FFT of `[B, h, w, 2]` complex images.
    Fourier,
    /// Fan-beam projection of `[B, n, n, 1]` images.
    Radon(Arc<RadonOperator>),
}

impl Transform {
    pub fn for_modality(modality: Modality, image_size: usize, views: usize) -> Result<Self> {
        Ok(match modality {
            Modality::Mri => Transform::Fourier,
            Modality::Ct => Transform::Radon(Arc::new(RadonOperator::new(CtGeometry::desk(image_size, views))?)),
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Transform::Fourier => tape.fft2(x, false),
            Transform::Radon(op) => {
                let op: Arc<dyn LinearOperator<T>> = op.clone();
                tape.linear_op(x, op)
            }
        }
    }
}

/// Charbonnier between `T x` and `T x_hat`.
pub fn transform_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var, tr: &Transform, eps: f64, per_pixel: bool) -> Result<Var> {
    let tx = tr.apply(tape, x)?;
    let th = tr.apply(tape, x_hat)?;
    charbonnier(tape, tx, th, eps, per_pixel)
}

/// Frozen random convolutional features standing in for a pretrained
/// network: three stride-2 3x3 stages of widths 8, 16, 32 with SiLU.
#[derive(Clone, Debug)]
pub struct FeatureStack<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];

impl<T: Scalar> FeatureStack<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[rng::domain::DATA, 0x5645_4154]);
        let mut cin = in_channels;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &w in &FEATURE_WIDTHS {
            weights.push(fan_in(&mut r, &[3, 3, cin, w], 9 * cin));
            biases.push(fan_in(&mut r, &[w], 9 * cin));
            cin = w;
        }
        FeatureStack { weights, biases }
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[2]
    }

    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(h, wv, Conv2dSpec::new(2, 1, 1))?;
            let y = tape.add(y, bv)?;
            h = tape.silu(y);
            out.push(h);
        }
        Ok(out)
    }
}

/// Mean absolute feature difference per stage, averaged over stages.
pub fn perceptual_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var, feat: &FeatureStack<T>) -> Result<Var> {
    let fx = feat.features(tape, x)?;
    let fh = feat.features(tape, x_hat)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fh) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        let m = tape.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    let total = total.expect("at least one stage");
    Ok(tape.scale(total, T::of(1.0 / FEATURE_WIDTHS.len() as f64)))
}

/// Handles to each weighted term of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub image: Var,
    pub transform: Var,
    pub perceptual: Var,
    pub adversarial: Option<Var>,
}

/// `alpha L_img + beta L_trans + gamma L_perc (+ eta L_adv)`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    w: &LossWeights,
    tr: &Transform,
    feat: &FeatureStack<T>,
    adversarial: Option<Var>,
) -> Result<LossTerms> {
    w.validate()?;
    let image = charbonnier(tape, x, x_hat, w.epsilon, w.per_pixel)?;
    let transform = transform_loss(tape, x, x_hat, tr, w.epsilon, w.per_pixel)?;
    let perceptual = perceptual_loss(tape, x, x_hat, feat)?;
    let a = tape.scale(image, T::of(w.alpha));
    let b = tape.scale(transform, T::of(w.beta));
    let g = tape.scale(perceptual, T::of(w.gamma));
    let mut total = tape.add(a, b)?;
    total = tape.add(total, g)?;
    if let Some(adv) = adversarial {
        let e = tape.scale(adv, T::of(w.eta));
        total = tape.add(total, e)?;
    }
    Ok(LossTerms {
        total,
        image,
        transform,
        perceptual,
        adversarial,
    })
}

/// Binary cross-entropy of logits against a constant label, averaged.
pub fn bce_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: bool) -> Var {
    // -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    let z = if label { tape.neg(logits) } else { logits };
    let s = tape.softplus(z);
    tape.mean(s)
}

/// Discriminator outputs for one batch: a global logit `[B, 1]` and a
/// per-pixel logit map `[B, h, w, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct DiscOut {
    pub global: Var,
    pub pixel: Var,
}

fn two_head_bce<T: Scalar>(tape: &mut Tape<T>, d: DiscOut, label: bool) -> Result<Var> {
    let g = bce_logits(tape, d.global, label);
    let p = bce_logits(tape, d.pixel, label);
    let s = tape.add(g, p)?;
    Ok(tape.scale(s, T::of(0.5)))
}

/// `BCE(real -> 1)` and `BCE(fake -> 0)` averaged over both heads and both
/// halves. The fake outputs must come from a detached generator image.
pub fn disc_loss<T: Scalar>(tape: &mut Tape<T>, real: DiscOut, fake: DiscOut) -> Result<Var> {
    let r = two_head_bce(tape, real, true)?;
    let f = two_head_bce(tape, fake, false)?;
    let s = tape.add(r, f)?;
    Ok(tape.scale(s, T::of(0.5)))
}

/// Non-saturating generator term `BCE(fake -> 1)` over both heads.
pub fn gen_adv_loss<T: Scalar>(tape: &mut Tape<T>, fake: DiscOut) -> Result<Var> {
    two_head_bce(tape, fake, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        uniform(&mut rng::keyed(seed, &[91]), shape, 1.0)
    }

    fn value(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.value(v).data()[0]
    }

    #[test]
    fn charbonnier_of_equal_inputs_is_epsilon() {
        let x = rand(&[2, 4, 4, 1], 1);
        for per_pixel in [false, true] {
            let v = value(|t| {
                let a = t.constant(x.clone());
                let b = t.constant(x.clone());
                charbonnier(t, a, b, 1e-9, per_pixel).unwrap()
            });
            assert!((v - 1e-9).abs() <= 1e-24, "per_pixel {per_pixel}: {v:e}");
            if !per_pixel {
                assert_eq!(v, 1e-9);
            }
        }
    }

    #[test]
    fn charbonnier_dominant_term() {
        let v = value(|t| {
            let a = t.constant(Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap());
            let b = t.constant(Tensor::zeros(&[1, 2]));
            charbonnier(t, a, b, 1e-9, false).unwrap()
        });
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_gradient_finite_at_kink() {
        let mut t = Tape::<f64>::new();
        let x = rand(&[1, 3], 2);
        let a = t.param(x.clone());
        let b = t.constant(x);
        let l = charbonnier(&mut t, a, b, 1e-9, false).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(a).unwrap().data().iter().all(|g| g.is_finite() && g.abs() < 1e-6));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[1, 4]));
        let b = t.constant(Tensor::zeros(&[1, 5]));
        assert!(charbonnier(&mut t, a, b, 1e-9, false).is_err());
    }

    #[test]
    fn perceptual_is_zero_on_equal_inputs() {
        let feat = FeatureStack::<f64>::new(2, 0);
        let x = rand(&[1, 8, 8, 2], 3);
        let v = value(|t| {
            let a = t.constant(x.clone());
            let b = t.constant(x.clone());
            perceptual_loss(t, a, b, &feat).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bce_limits() {
        let logits = |v: f64| Tensor::full(&[2, 1], v);
        let pix = |v: f64| Tensor::full(&[2, 4, 4, 1], v);
        let run = |r: f64, f: f64| {
            let mut t = Tape::<f64>::new();
            let real = DiscOut {
                global: t.constant(logits(r)),
                pixel: t.constant(pix(r)),
            };
            let fake = DiscOut {
                global: t.constant(logits(f)),
                pixel: t.constant(pix(f)),
            };
            let d = disc_loss(&mut t, real, fake).unwrap();
            let g = gen_adv_loss(&mut t, fake).unwrap();
            (t.value(d).data()[0], t.value(g).data()[0])
        };
        let (d, g) = run(0.0, 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((d - ln2).abs() < 1e-12 && (g - ln2).abs() < 1e-12);
        let (d, g) = run(20.0, -20.0);
        assert!(d < 1e-8 && g > 19.9);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            beta: -0.1,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
