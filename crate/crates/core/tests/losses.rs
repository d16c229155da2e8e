mod common;

use std::sync::Arc;

use common::rand_t;
use mambamir::autodiff::{grad_check, grad_check_all};
use mambamir::imaging::ct::{CtGeometry, RadonOperator};
use mambamir::loss::{self, charbonnier, perceptual_loss, total_loss, FeatureStack, LossWeights, Transform};
use mambamir::optim::{Adam, AdamConfig};
use mambamir::params::ParamStore;
use mambamir::{Tape, Tensor};
use proptest::prelude::*;

fn eval_total(x: &Tensor<f64>, xh: &Tensor<f64>, w: &LossWeights, tr: &Transform, feat: &FeatureStack<f64>) -> [f64; 4] {
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(xh.clone()));
    let terms = total_loss(&mut t, a, b, w, tr, feat, None).unwrap();
    [terms.total, terms.image, terms.transform, terms.perceptual].map(|v| t.value(v).data()[0])
}

#[test]
fn charbonnier_gradient_small_pair() {
    let a = rand_t(1, &[1, 4, 4, 1], 1.0);
    let b = rand_t(2, &[1, 4, 4, 1], 1.0);
    let err = grad_check_all(
        |t, v| charbonnier(t, v[0], v[1], 1e-9, false),
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn fourier_transform_loss_equals_image_loss() {
    let x = rand_t(3, &[2, 8, 8, 2], 1.0);
    let xh = rand_t(4, &[2, 8, 8, 2], 1.0);
    let mut t = Tape::new();
    let (a, b) = (t.constant(x), t.constant(xh));
    let img = charbonnier(&mut t, a, b, 1e-9, false).unwrap();
    let tr = loss::transform_loss(&mut t, a, b, &Transform::Fourier, 1e-9, false).unwrap();
    let (i, f) = (t.value(img).data()[0], t.value(tr).data()[0]);
    assert!((i - f).abs() / i < 1e-5, "{i} {f}");
}

#[test]
fn radon_transform_loss_gradient() {
    let tr = Transform::Radon(Arc::new(RadonOperator::new(CtGeometry::desk(8, 6)).unwrap()));
    let x = rand_t(5, &[1, 8, 8, 1], 1.0);
    let xh = rand_t(6, &[1, 8, 8, 1], 1.0);
    let err = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            loss::transform_loss(t, xv, v, &tr, 1e-9, false)
        },
        &xh,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn perceptual_grows_with_blend() {
    let feat = FeatureStack::<f64>::new(1, 0);
    for seed in 0..10 {
        let x = rand_t(seed, &[1, 16, 16, 1], 1.0);
        let d = rand_t(50 + seed, &[1, 16, 16, 1], 1.0);
        let at = |s: f64| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = t.constant(Tensor::new(x.shape(), x.data().iter().zip(d.data()).map(|(a, b)| a + s * b).collect()).unwrap());
            let l = perceptual_loss(&mut t, xv, y, &feat).unwrap();
            t.value(l).data()[0]
        };
        let (l0, l1, l2) = (at(0.0), at(0.5), at(1.0));
        assert!(l0 <= l1 && l1 <= l2, "seed {seed}: {l0} {l1} {l2}");
    }
}

#[test]
fn adam_matches_hand_recursion() {
    // f(x) = (x - 3)^2, two steps from x = 0
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut store = ParamStore::new();
    store.add("x", Tensor::new(&[1], vec![0.0f64]).unwrap());
    let mut adam = Adam::new(cfg, &store);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for step in 1..=2 {
        let cur = store.tensors().next().unwrap().data()[0];
        adam.step(&mut store, &[Tensor::new(&[1], vec![2.0 * (cur - 3.0)]).unwrap()]).unwrap();
        let g = 2.0 * (x - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(step));
        let vh = v / (1.0 - 0.999f64.powi(step));
        x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((store.tensors().next().unwrap().data()[0] - x).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_are_nonnegative(seed in any::<u64>(), alpha in 0.0f64..20.0, beta in 0.0f64..2.0, gamma in 0.0f64..1.0, per_pixel in any::<bool>()) {
        let w = LossWeights { alpha, beta, gamma, per_pixel, ..LossWeights::default() };
        let feat = FeatureStack::<f64>::new(2, 0);
        let x = rand_t(seed, &[2, 8, 8, 2], 1.0);
        let xh = rand_t(seed ^ 7, &[2, 8, 8, 2], 1.0);
        for v in eval_total(&x, &xh, &w, &Transform::Fourier, &feat) {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn doubling_weights_doubles_total(seed in any::<u64>(), alpha in 0.0f64..20.0, beta in 0.0f64..2.0, gamma in 0.0f64..1.0) {
        let feat = FeatureStack::<f64>::new(1, 1);
        let tr = Transform::Radon(Arc::new(RadonOperator::new(CtGeometry::desk(8, 4)).unwrap()));
        let x = rand_t(seed, &[1, 8, 8, 1], 1.0);
        let xh = rand_t(seed ^ 3, &[1, 8, 8, 1], 1.0);
        let w = LossWeights { alpha, beta, gamma, eta: 0.0, ..LossWeights::default() };
        let w2 = LossWeights { alpha: 2.0 * alpha, beta: 2.0 * beta, gamma: 2.0 * gamma, ..w };
        let (a, b) = (eval_total(&x, &xh, &w, &tr, &feat)[0], eval_total(&x, &xh, &w2, &tr, &feat)[0]);
        prop_assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
