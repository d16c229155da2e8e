mod common;

use common::{perturbed, rand_t};
use mambamir::autodiff::grad_check_all;
use mambamir::loss::{self, FeatureStack, LossWeights, Transform};
use mambamir::net::{self, draw_masks, ModelParams, NetConfig};
use mambamir::params::Bound;
use mambamir::{Tape, Tensor};
use proptest::prelude::*;

fn tiny(ch: usize) -> NetConfig {
    NetConfig {
        embed_dim: 8,
        groups: 1,
        blocks_per_group: 1,
        ..NetConfig::desk(ch)
    }
}

#[test]
fn tiny_network_loss_gradient() {
    let cfg = tiny(2);
    let model = perturbed::<f64>(&cfg, 1, 0.1);
    let x = rand_t(2, &[1, 8, 8, 2], 1.0);
    let xu = rand_t(3, &[1, 8, 8, 2], 1.0);
    let draws = draw_masks(&cfg, 4, 0, &[0], true);
    let feat = FeatureStack::<f64>::new(2, 0);
    let w = LossWeights::default();
    let mut inputs = vec![xu];
    inputs.extend(model.store.tensors().cloned());
    let err = grad_check_all(
        |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let xv = t.constant(x.clone());
            let y = net::mambamir_forward(t, v[0], &model, &bound, &draws)?;
            Ok(loss::total_loss(t, xv, y, &w, &Transform::Fourier, &feat, None)?.total)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn embedding_commutes_with_patch_translation() {
    let (p, c) = (4, 3);
    let x = rand_t(5, &[1, 16, 16, 1], 1.0);
    let w = rand_t(6, &[p, p, 1, c], 0.5);
    let b = rand_t(7, &[c], 0.5);
    // shift right by one patch, zero fill
    let mut shifted = Tensor::zeros(&[1, 16, 16, 1]);
    for r in 0..16 {
        for col in p..16 {
            shifted.data_mut()[r * 16 + col] = x.data()[r * 16 + col - p];
        }
    }
    let mut t = Tape::new();
    let (xv, sv, wv, bv) = (t.constant(x), t.constant(shifted), t.constant(w), t.constant(b));
    let z = net::patch_embed(&mut t, xv, wv, bv, p).unwrap();
    let zs = net::patch_embed(&mut t, sv, wv, bv, p).unwrap();
    let (z, zs) = (t.value(z).data(), t.value(zs).data());
    for r in 0..4 {
        for col in 1..4 {
            for k in 0..c {
                assert!((zs[(r * 4 + col) * c + k] - z[(r * 4 + col - 1) * c + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_weights_round_trip_patches() {
    let (p, ch) = (4, 2);
    let e = p * p * ch;
    let x = rand_t(8, &[2, 8, 12, ch], 1.0);
    // embed weight [p, p, ch, e] routing every pixel value to its own channel,
    // and unembed [e, p*p*ch] as the identity matrix
    let mut we = vec![0.0; e * e];
    for i in 0..e {
        we[i * e + i] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w_embed = t.constant(Tensor::new(&[p, p, ch, e], we.clone()).unwrap());
    let w_un = t.constant(Tensor::new(&[e, e], we).unwrap());
    let zero = t.constant(Tensor::zeros(&[e]));
    let z = net::patch_embed(&mut t, xv, w_embed, zero, p).unwrap();
    assert_eq!(t.shape(z), &[2, 2, 3, e]);
    // channel k of token (i, j) is pixel (i*p + k / (p*ch), j*p + (k / ch) % p), channel k % ch
    let zd = t.value(z).data().to_vec();
    for (ti, chunk) in zd.chunks_exact(e).enumerate() {
        let (bi, i, j) = (ti / 6, (ti % 6) / 3, ti % 3);
        for (k, &v) in chunk.iter().enumerate() {
            let (r, c, q) = (i * p + k / (p * ch), j * p + (k / ch) % p, k % ch);
            assert_eq!(v, x.data()[((bi * 8 + r) * 12 + c) * ch + q]);
        }
    }
    let y = net::patch_unembed(&mut t, z, w_un, zero, p).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn seeded_forward_replays() {
    let cfg = tiny(1);
    let m = perturbed::<f32>(&cfg, 2, 0.3);
    let x = rand_t(9, &[2, 8, 8, 1], 1.0).cast::<f32>();
    let run = |step| m.run(&x, &draw_masks(&cfg, 3, step, &[0, 1], true)).unwrap();
    assert_eq!(run(5), run(5));
    assert!((0..8).any(|s| run(s) != run(5)));
}

#[test]
fn parameter_count_closed_form() {
    for cfg in [NetConfig::desk(1), NetConfig::desk(2), NetConfig::full_scale(1), tiny(2)] {
        let (c, p, ch, ci, n) = (cfg.embed_dim, cfg.patch_size, cfg.in_channels, cfg.embed_dim * cfg.expansion, cfg.n_state);
        let s6 = 3 * ci * n + ci * ci + 2 * ci;
        let block = 2 * c + (c + 1) * ci + 10 * ci + s6 + 2 * ci + (c + 1) * ci + (ci + 1) * c;
        let want = (p * p * ch + 1) * c + cfg.groups * (cfg.blocks_per_group * block + 2 * c + 9 * c * c + c) + (c + 1) * p * p * ch;
        assert_eq!(ModelParams::<f32>::init(&cfg).store.numel(), want);
        assert_eq!(cfg.param_count(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fresh_network_is_identity(seed in any::<u64>(), ch in 1usize..=2, hp in 1usize..=4, wp in 1usize..=4) {
        let cfg = NetConfig { seed, ..NetConfig::desk(ch) };
        let m = ModelParams::<f32>::init(&cfg);
        let x = rand_t(seed, &[2, hp * 4, wp * 4, ch], 3.0).cast::<f32>();
        let y = m.run(&x, &draw_masks(&cfg, seed, 0, &[0, 1], false)).unwrap();
        prop_assert_eq!(y, x);
    }
}
