//! Small U-Net style discriminator with a global and a per-pixel head.

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::loss::DiscOut;
use crate::nn;
use crate::params::{fan_in, Bound, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

const W1: usize = 8;
const W2: usize = 16;

#[derive(Clone, Debug)]
pub struct DiscLayout {
    enc1: (ParamId, ParamId),
    enc2: (ParamId, ParamId),
    head: (ParamId, ParamId),
    up1: (ParamId, ParamId),
    dec1: (ParamId, ParamId),
    up2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct DiscriminatorParams<T> {
    pub in_channels: usize,
    pub store: ParamStore<T>,
    layout: DiscLayout,
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn init(in_channels: usize, seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[rng::domain::DATA, 0x4449_5343]);
        let mut s = ParamStore::new();
        let c = in_channels;
        let mut pair = |s: &mut ParamStore<T>, name: &str, shape: &[usize], fan: usize| {
            let out = *shape.last().expect("weight shape");
            (
                s.add(format!("{name}.w"), fan_in(&mut r, shape, fan)),
                s.add(format!("{name}.b"), Tensor::zeros(&[out])),
            )
        };
        let layout = DiscLayout {
            enc1: pair(&mut s, "enc1", &[3, 3, c, W1], 9 * c),
            enc2: pair(&mut s, "enc2", &[3, 3, W1, W2], 9 * W1),
            head: pair(&mut s, "head", &[W2, 1], W2),
            up1: pair(&mut s, "up1", &[W2, 4 * W1], W2),
            dec1: pair(&mut s, "dec1", &[3, 3, 2 * W1, W1], 18 * W1),
            up2: pair(&mut s, "up2", &[W1, 4], W1),
        };
        DiscriminatorParams {
            in_channels,
            store: s,
            layout,
        }
    }

    /// Logits for a `[B, h, w, c]` batch with `h, w` divisible by 4.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<DiscOut> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.in_channels || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return Err(TensorError::Invalid {
                op: "discriminator",
                msg: format!("expected [B, 4k, 4k, {}], got {s:?}", self.in_channels),
            });
        }
        let l = &self.layout;
        let v = |p: (ParamId, ParamId)| (bound.var(p.0), bound.var(p.1));
        let (w, b) = v(l.enc1);
        let e1 = nn::conv2d(tape, x, w, b, Conv2dSpec::new(2, 1, 1))?;
        let e1 = tape.silu(e1);
        let (w, b) = v(l.enc2);
        let e2 = nn::conv2d(tape, e1, w, b, Conv2dSpec::new(2, 1, 1))?;
        let e2 = tape.silu(e2);

        let (bsz, h4, w4) = (s[0], s[1] / 4, s[2] / 4);
        let flat = tape.reshape(e2, &[bsz, h4 * w4, W2])?;
        let pooled = tape.sum_axis(flat, 1)?;
        let pooled = tape.scale(pooled, T::of(1.0 / (h4 * w4) as f64));
        let (w, b) = v(l.head);
        let global = nn::linear(tape, pooled, w, b)?;

        let (w, b) = v(l.up1);
        let u1 = nn::linear(tape, e2, w, b)?;
        let u1 = tape.depth_to_space(u1, 2)?;
        let cat = tape.concat(&[u1, e1], 3)?;
        let (w, b) = v(l.dec1);
        let d1 = nn::conv2d(tape, cat, w, b, Conv2dSpec::new(1, 1, 1))?;
        let d1 = tape.silu(d1);
        let (w, b) = v(l.up2);
        let u2 = nn::linear(tape, d1, w, b)?;
        let pixel = tape.depth_to_space(u2, 2)?;
        Ok(DiscOut { global, pixel })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_all;
    use crate::params::uniform;

    #[test]
    fn output_shapes_and_finite() {
        let d = DiscriminatorParams::<f32>::init(2, 0);
        let mut t = Tape::new();
        let b = d.store.bind(&mut t, false);
        let x = t.constant(Tensor::full(&[3, 16, 8, 2], 0.5));
        let o = d.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.shape(o.global), &[3, 1]);
        assert_eq!(t.shape(o.pixel), &[3, 16, 8, 1]);
        assert!(t.value(o.pixel).is_finite());
    }

    #[test]
    fn gradient_through_both_heads() {
        let d = DiscriminatorParams::<f64>::init(1, 1);
        let x = uniform::<f64, _>(&mut rng::keyed(2, &[]), &[1, 8, 8, 1], 1.0);
        let err = grad_check_all(
            |t, v| {
                let bound = d.store.bind(t, false);
                let o = d.forward(t, &bound, v[0])?;
                let g = t.sum(o.global);
                let p = t.mul(o.pixel, o.pixel)?;
                let p = t.sum(p);
                t.add(g, p)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn one_step_lowers_d_loss() {
        use crate::loss::disc_loss;
        use crate::optim::{Adam, AdamConfig};
        let mut d = DiscriminatorParams::<f64>::init(1, 4);
        let mut r = rng::keyed(5, &[]);
        let real = uniform::<f64, _>(&mut r, &[2, 8, 8, 1], 0.5).map(|v| v + 0.5);
        let fake = uniform::<f64, _>(&mut r, &[2, 8, 8, 1], 0.1);
        let eval = |d: &DiscriminatorParams<f64>| {
            let mut t = Tape::new();
            let b = d.store.bind(&mut t, true);
            let (rv, fv) = (t.constant(real.clone()), t.constant(fake.clone()));
            let ro = d.forward(&mut t, &b, rv).unwrap();
            let fo = d.forward(&mut t, &b, fv).unwrap();
            let l = disc_loss(&mut t, ro, fo).unwrap();
            t.backward(l).unwrap();
            (t.value(l).data()[0], d.store.grads(&t, &b))
        };
        let mut adam = Adam::new(AdamConfig::default(), &d.store);
        let (before, g) = eval(&d);
        adam.step(&mut d.store, &g).unwrap();
        let (after, _) = eval(&d);
        assert!(after < before, "{before} -> {after}");
    }
}
