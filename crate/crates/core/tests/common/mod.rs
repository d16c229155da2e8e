#![allow(dead_code)]

use mambamir::params::uniform;
use mambamir::rng;
use mambamir::ssm::{ScanSequence, SsmParams};
use mambamir::Tensor;

pub fn rand_t(seed: u64, shape: &[usize], bound: f64) -> Tensor<f64> {
    uniform(&mut rng::keyed(seed, &[0xACC]), shape, bound)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// A random scan instance with `L` tokens, `C` channels, `N` states.
pub fn scan_instance(seed: u64, l: usize, c: usize, n: usize) -> (ScanSequence<f64>, SsmParams<f64>) {
    let mut r = rng::keyed(seed, &[0x5CA]);
    let mut p = SsmParams::<f64>::init(c, n, &mut r);
    let jitter: Tensor<f64> = uniform(&mut r, p.a_log.shape(), 0.5);
    p.a_log = Tensor::new(p.a_log.shape(), p.a_log.data().iter().zip(jitter.data()).map(|(a, j)| a + j).collect()).unwrap();
    p.d = uniform(&mut r, &[c], 1.0);
    let tokens = uniform(&mut r, &[l, c], 1.0);
    let seq = ScanSequence {
        tokens,
        b: uniform(&mut r, &[l, n], 1.0),
        c: uniform(&mut r, &[l, n], 1.0),
        delta: uniform::<f64, _>(&mut r, &[l, c], 0.5).map(|v| v + 0.55),
    };
    (seq, p)
}

/// Unrolled closed form `y_k = sum_j <C_k, prod_{i=j+1..k} Abar_i * Bbar_j> u_j + D u_k`.
pub fn scan_oracle(seq: &ScanSequence<f64>, p: &SsmParams<f64>) -> Vec<f64> {
    let (l, c, n) = (seq.len(), p.channels(), p.n_state());
    let a = p.a();
    let (u, dt, b, cm) = (seq.tokens.data(), seq.delta.data(), seq.b.data(), seq.c.data());
    let mut y = vec![0.0; l * c];
    for k in 0..l {
        for ch in 0..c {
            let mut acc = p.d.data()[ch] * u[k * c + ch];
            for j in 0..=k {
                for s in 0..n {
                    let av = a.data()[ch * n + s];
                    let prod: f64 = (j + 1..=k).map(|i| (dt[i * c + ch] * av).exp()).product();
                    acc += cm[k * n + s] * prod * dt[j * c + ch] * b[j * n + s] * u[j * c + ch];
                }
            }
            y[k * c + ch] = acc;
        }
    }
    y
}

/// Median wall-clock seconds of `runs` calls.
pub fn median_secs(runs: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..runs)
        .map(|_| {
            let s = std::time::Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t[runs / 2]
}

/// Plain dot-product adjoint mismatch `|<Ax, y> - <x, A*y>| / (|Ax| |y|)`.
pub fn adjoint_mismatch(ax: &Tensor<f64>, y: &Tensor<f64>, x: &Tensor<f64>, aty: &Tensor<f64>) -> f64 {
    (ax.dot(y) - x.dot(aty)).abs() / (ax.norm() * y.norm())
}

/// Fresh parameters plus uniform noise, so the zero-initialised output
/// projection no longer hides the interior of the network.
pub fn perturbed<T: mambamir::Scalar>(cfg: &mambamir::net::NetConfig, seed: u64, amount: f64) -> mambamir::net::ModelParams<T> {
    let mut m = mambamir::net::ModelParams::<T>::init(cfg);
    let mut r = rng::keyed(seed, &[0x9E7]);
    for p in m.store.tensors_mut() {
        let noise: Tensor<T> = uniform(&mut r, p.shape(), amount);
        for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
            *a = *a + *b;
        }
    }
    m
}

/// The seeded desk MRI smoke configuration: 32x32 phantoms, AF 8, 2000 steps.
pub fn desk_mri_run() -> mambamir::train::TrainConfig {
    let mut c = mambamir::train::TrainConfig::desk(mambamir::loss::Modality::Mri);
    c.steps = 2000;
    c.log_every = 500;
    c
}
