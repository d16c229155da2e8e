mod common;

use mambamir::imaging::phantom::{make_phantom, PhantomKind};
use mambamir::io::{checkpoint, kv, pgm, tensor_file};
use mambamir::metrics::{ssim, Gray};
use mambamir::net::NetConfig;
use mambamir::Tensor;
use proptest::prelude::*;

/// Straightforward 2-D windowed SSIM, written without the separable filter.
fn ssim_direct(x: &Gray, y: &Gray) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=x.h - k {
        for c in 0..=x.w - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wv = win[i * k + j];
                    let (a, b) = (x.data[(r + i) * x.w + c + j], y.data[(r + i) * y.w + c + j]);
                    mx += wv * a;
                    my += wv * b;
                    xx += wv * a * a;
                    yy += wv * b * b;
                    xy += wv * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_agrees_with_direct_window() {
    let x = make_phantom::<f64>(PhantomKind::SheppLogan, 48, 48, 0).image;
    let n = common::rand_t(9, &[48, 48], 0.5).map(|v| v + 0.5);
    let y = Tensor::new(&[48, 48], x.data().iter().zip(n.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect()).unwrap();
    let (gx, gy) = (Gray::from_tensor(&x).unwrap(), Gray::from_tensor(&y).unwrap());
    let (a, b) = (ssim(&gy, &gx).unwrap(), ssim_direct(&gy, &gx));
    assert!((a - b).abs() < 1e-4, "{a} {b}");
    assert!((ssim(&gx, &gx).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn manifest_survives_round_trip() {
    for cfg in [NetConfig::desk(1), NetConfig::full_scale(2), NetConfig { eval_mask: true, exact_zoh: true, seed: 99, ..NetConfig::desk(2) }] {
        assert_eq!(checkpoint::parse_manifest(&checkpoint::manifest_text(&cfg)).unwrap(), cfg);
    }
}

/// Every checked-in fuzz seed goes through the same checks as its target.
#[test]
fn checked_in_fuzz_seeds_hold_target_invariants() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let Ok(dirs) = std::fs::read_dir(&root) else {
        return;
    };
    let mut accepted = 0;
    for dir in dirs.flatten() {
        let target = dir.file_name().to_string_lossy().into_owned();
        for f in std::fs::read_dir(dir.path()).unwrap().flatten() {
            let bytes = std::fs::read(f.path()).unwrap();
            let text = String::from_utf8_lossy(&bytes);
            let ok = match target.as_str() {
                "tensor_file" => tensor_file::decode(&bytes).map(|t| assert_eq!(tensor_file::encode(&t).unwrap(), bytes)).is_ok(),
                "net_manifest" => checkpoint::parse_manifest(&text)
                    .map(|c| assert_eq!(checkpoint::parse_manifest(&checkpoint::manifest_text(&c)).unwrap(), c))
                    .is_ok(),
                "train_config" => mambamir::train::TrainConfig::parse(&text).map(|c| assert!(c.validate().is_ok())).is_ok(),
                other => panic!("corpus for unknown target {other}"),
            };
            accepted += ok as usize;
        }
    }
    // the corpus mixes valid and broken seeds
    assert!(accepted >= 3, "{accepted}");
}

fn pgm_pixels(bytes: &[u8]) -> &[u8] {
    // header is three newline-terminated lines
    let mut seen = 0;
    let start = bytes.iter().position(|&b| {
        seen += (b == b'\n') as usize;
        seen == 3
    });
    &bytes[start.unwrap() + 1..]
}

proptest! {
    #[test]
    fn tensor_file_round_trip(shape in prop::collection::vec(1usize..6, 1..=4), bits in prop::collection::vec(any::<u32>(), 1296)) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(&shape, bits[..n].iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let back = tensor_file::decode(&tensor_file::encode(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = tensor_file::decode(&bytes);
    }

    #[test]
    fn decode_of_valid_header_with_garbage(extents in prop::collection::vec(any::<u32>(), 1..=4), tail in prop::collection::vec(any::<u8>(), 0..32)) {
        let mut b = b"MMIR".to_vec();
        b.extend_from_slice(&[1, 0, extents.len() as u8, 0]);
        for e in &extents {
            b.extend_from_slice(&e.to_le_bytes());
        }
        b.extend_from_slice(&tail);
        if let Ok(t) = tensor_file::decode(&b) {
            prop_assert_eq!(4 * t.len(), tail.len());
        }
    }

    #[test]
    fn kv_parse_never_panics(text in "[ -~\n]{0,200}") {
        let _ = kv::parse(&text);
        let _ = checkpoint::parse_manifest(&text);
        let _ = mambamir::train::TrainConfig::parse(&text);
    }

    #[test]
    fn pgm_constant_and_monotone(v in -5.0f64..5.0, vals in prop::collection::vec(-10.0f64..10.0, 16)) {
        let c = pgm::encode_pgm(&Tensor::full(&[3, 5], v)).unwrap();
        let px = pgm_pixels(&c);
        prop_assert_eq!(px.len(), 15);
        prop_assert!(px.iter().all(|&p| p == px[0]));

        let t = Tensor::new(&[4, 4], vals.clone()).unwrap();
        let enc = pgm::encode_pgm(&t).unwrap();
        let px = pgm_pixels(&enc);
        for i in 0..16 {
            for j in 0..16 {
                if vals[i] < vals[j] {
                    prop_assert!(px[i] <= px[j]);
                }
            }
        }
    }
}
