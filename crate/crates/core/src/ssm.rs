//! Selective state-space (S6) core: discretisation, input-dependent
//! parameter projection and the sequential scan.
//!
//! The state matrix is diagonal per channel and stored as `a_log` with
//! `A = -exp(a_log)`, so every eigenvalue is strictly negative. For a token
//! sequence `u_1..u_L` each channel runs
//!
//! ```text
//! h_k = exp(delta_k * A) * h_{k-1} + delta_k * B_k * u_k
//! y_k = <C_k, h_k> + D * u_k
//! ```
//!
//! with `h_0 = 0`. `B_k`, `C_k` and `delta_k` are projected from the token
//! itself. The exact zero-order-hold input matrix
//! `(exp(delta*A) - 1) / A * B` is available through the `exact_zoh` flag.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{fan_in, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// Plain (tape-free) parameter set for one S6 module over `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    /// `[C, N]`; `A = -exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[C]` skip term.
    pub d: Tensor<T>,
    /// `[C, N]` token -> `B_k`.
    pub w_b: Tensor<T>,
    /// `[C, N]` token -> `C_k`.
    pub w_c: Tensor<T>,
    /// `[C, C]` token -> pre-softplus timescale.
    pub w_dt: Tensor<T>,
    /// `[C]`.
    pub b_dt: Tensor<T>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Scalar> SsmParams<T> {
    /// `A_init = -n` for state index `n = 1..N`, `D = 1`, and `softplus(b_dt)`
    /// log-uniform in `[DELTA_MIN, DELTA_MAX]`.
    pub fn init<R: Rng>(channels: usize, n_state: usize, rng: &mut R) -> Self {
        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (1..=n_state).map(|n| (n as f64).ln()))
            .collect();
        let b_dt: Vec<f64> = (0..channels)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (DELTA_MIN.ln() + u * (DELTA_MAX.ln() - DELTA_MIN.ln())).exp();
                inverse_softplus(dt)
            })
            .collect();
        SsmParams {
            a_log: Tensor::from_f64(&[channels, n_state], &a_log).expect("shape"),
            d: Tensor::full(&[channels], T::one()),
            w_b: fan_in(rng, &[channels, n_state], channels),
            w_c: fan_in(rng, &[channels, n_state], channels),
            w_dt: fan_in(rng, &[channels, channels], channels),
            b_dt: Tensor::from_f64(&[channels], &b_dt).expect("shape"),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.len()
    }

    pub fn n_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The continuous state matrix diagonal `A = -exp(a_log)`, `[C, N]`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Registers each field in `store` under `prefix`.
    pub fn register(self, store: &mut ParamStore<T>, prefix: &str) -> SsmIds {
        SsmIds {
            a_log: store.add(format!("{prefix}.a_log"), self.a_log),
            d: store.add(format!("{prefix}.d"), self.d),
            w_b: store.add(format!("{prefix}.w_b"), self.w_b),
            w_c: store.add(format!("{prefix}.w_c"), self.w_c),
            w_dt: store.add(format!("{prefix}.w_dt"), self.w_dt),
            b_dt: store.add(format!("{prefix}.b_dt"), self.b_dt),
        }
    }
}

/// Locations of an [`SsmParams`] inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt: ParamId,
    pub b_dt: ParamId,
}

impl SsmIds {
    pub fn extract<T: Scalar>(&self, store: &ParamStore<T>) -> SsmParams<T> {
        SsmParams {
            a_log: store.get(self.a_log).clone(),
            d: store.get(self.d).clone(),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            w_dt: store.get(self.w_dt).clone(),
            b_dt: store.get(self.b_dt).clone(),
        }
    }
}

/// Tape handles for an S6 parameter set.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Var,
    pub b_dt: Var,
}

/// A projected sequence ready for [`selective_scan`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence<T> {
    /// `[L, C]`
    pub tokens: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
    /// `[L, C]`, strictly positive.
    pub delta: Tensor<T>,
}

impl<T: Scalar> ScanSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(a_bar, b_bar)` with `a_bar = exp(delta * a)` and `b_bar = delta * b`.
pub fn discretize<T: Scalar>(delta: T, a: &[T], b: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta > T::zero()) {
        return Err(TensorError::Invalid {
            op: "discretize",
            msg: format!("delta must be positive, got {delta}"),
        });
    }
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "discretize",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let a_bar = a.iter().map(|&av| (delta * av).exp()).collect();
    let b_bar = b.iter().map(|&bv| delta * bv).collect();
    Ok((a_bar, b_bar))
}

/// Exact zero-order hold: `b_bar = (exp(delta * a) - 1) / a * b`.
pub fn discretize_exact<T: Scalar>(delta: T, a: &[T], b: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let (a_bar, _) = discretize(delta, a, b)?;
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(&av, &bv)| zoh_coeff(delta, av, (delta * av).exp_m1()) * bv)
        .collect();
    Ok((a_bar, b_bar))
}

// (e^{delta a} - 1) / a, falling back to delta as a -> 0
fn zoh_coeff<T: Scalar>(delta: T, a: T, em1: T) -> T {
    if a.abs() < T::of(1e-12) {
        delta
    } else {
        em1 / a
    }
}

/// `b_k = w_b^T token_k`, `c_k = w_c^T token_k`,
/// `delta_k = softplus(w_dt^T token_k + b_dt)`.
pub fn project_params<T: Scalar>(tokens: &Tensor<T>, p: &SsmParams<T>) -> Result<ScanSequence<T>> {
    let s = tokens.shape();
    let (ch, n) = (p.channels(), p.n_state());
    if s.len() != 2 || s[1] != ch {
        return Err(TensorError::ShapeMismatch {
            op: "project_params",
            lhs: s.to_vec(),
            rhs: vec![0, ch],
        });
    }
    let l = s[0];
    let x = tokens.data();
    let proj = |w: &[T], out_dim: usize| -> Vec<T> {
        let mut out = vec![T::zero(); l * out_dim];
        for k in 0..l {
            for i in 0..ch {
                let xv = x[k * ch + i];
                for j in 0..out_dim {
                    out[k * out_dim + j] = out[k * out_dim + j] + xv * w[i * out_dim + j];
                }
            }
        }
        out
    };
    let b = proj(p.w_b.data(), n);
    let c = proj(p.w_c.data(), n);
    let mut delta = proj(p.w_dt.data(), ch);
    for (k, v) in delta.iter_mut().enumerate() {
        *v = crate::autodiff::softplus_scalar(*v + p.b_dt.data()[k % ch]);
    }
    Ok(ScanSequence {
        tokens: tokens.clone(),
        b: Tensor::new(&[l, n], b)?,
        c: Tensor::new(&[l, n], c)?,
        delta: Tensor::new(&[l, ch], delta)?,
    })
}

/// Sequential recurrence over the sequence; returns `[L, C]`.
pub fn selective_scan<T: Scalar>(seq: &ScanSequence<T>, p: &SsmParams<T>, exact_zoh: bool) -> Result<Tensor<T>> {
    let l = seq.len();
    let (ch, n) = (p.channels(), p.n_state());
    let dims = ScanDims::infer(
        &[1, l, ch],
        &[1, seq.delta.shape()[0], seq.delta.shape()[1]],
        p.a_log.shape(),
        &[1, seq.b.shape()[0], seq.b.shape()[1]],
        &[1, seq.c.shape()[0], seq.c.shape()[1]],
        p.d.shape(),
    )?;
    debug_assert_eq!(dims.n_state, n);
    let a = p.a();
    let y = scan_kernel(
        &dims,
        seq.tokens.data(),
        seq.delta.data(),
        a.data(),
        seq.b.data(),
        seq.c.data(),
        p.d.data(),
        exact_zoh,
        None,
    );
    Tensor::new(&[l, ch], y)
}

/// Dimensions of a batched scan: `u, delta: [B, L, C]`, `a: [C, N]`,
/// `b, c: [B, L, N]`, `d: [C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub n_state: usize,
}

impl ScanDims {
    pub fn infer(u: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<Self> {
        let bad = |lhs: &[usize], rhs: &[usize]| TensorError::ShapeMismatch {
            op: "selective_scan",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if u.len() != 3 || u[1] == 0 {
            return Err(bad(u, &[0, 0, 0]));
        }
        if delta != u {
            return Err(bad(u, delta));
        }
        if a.len() != 2 || a[0] != u[2] {
            return Err(bad(u, a));
        }
        let want_bc = [u[0], u[1], a[1]];
        if b != want_bc {
            return Err(bad(&want_bc, b));
        }
        if c != want_bc {
            return Err(bad(&want_bc, c));
        }
        if d != [u[2]] {
            return Err(bad(&[u[2]], d));
        }
        Ok(ScanDims {
            batch: u[0],
            len: u[1],
            channels: u[2],
            n_state: a[1],
        })
    }
}

/// Forward recurrence. When `states` is given it receives every `h_k`,
/// laid out `[B, L, C, N]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_kernel<T: Scalar>(
    dims: &ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    exact_zoh: bool,
    mut states: Option<&mut [T]>,
) -> Vec<T> {
    let ScanDims {
        batch,
        len,
        channels: ch,
        n_state: n,
    } = *dims;
    let mut y = vec![T::zero(); batch * len * ch];
    let mut h = vec![T::zero(); n];
    for bi in 0..batch {
        for ci in 0..ch {
            h.iter_mut().for_each(|v| *v = T::zero());
            let ac = &a[ci * n..(ci + 1) * n];
            for k in 0..len {
                let t = bi * len + k;
                let uv = u[t * ch + ci];
                let dt = delta[t * ch + ci];
                let bk = &b[t * n..(t + 1) * n];
                let ck = &c[t * n..(t + 1) * n];
                let mut acc = T::zero();
                for j in 0..n {
                    let a_bar = (dt * ac[j]).exp();
                    let coeff = if exact_zoh {
                        zoh_coeff(dt, ac[j], a_bar - T::one())
                    } else {
                        dt
                    };
                    h[j] = a_bar * h[j] + coeff * bk[j] * uv;
                    acc = acc + ck[j] * h[j];
                }
                y[t * ch + ci] = acc + d[ci] * uv;
                if let Some(st) = states.as_deref_mut() {
                    st[(t * ch + ci) * n..(t * ch + ci + 1) * n].copy_from_slice(&h);
                }
            }
        }
    }
    y
}

pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_kernel_backward<T: Scalar>(
    dims: &ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    exact_zoh: bool,
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        len,
        channels: ch,
        n_state: n,
    } = *dims;
    let z = T::zero();
    let mut g = ScanGrads {
        u: vec![z; u.len()],
        delta: vec![z; delta.len()],
        a: vec![z; a.len()],
        b: vec![z; b.len()],
        c: vec![z; c.len()],
        d: vec![z; d.len()],
    };
    let mut dh = vec![z; n];
    for bi in 0..batch {
        for ci in 0..ch {
            dh.iter_mut().for_each(|v| *v = z);
            let ac = &a[ci * n..(ci + 1) * n];
            for k in (0..len).rev() {
                let t = bi * len + k;
                let ti = t * ch + ci;
                let (uv, dt, gv) = (u[ti], delta[ti], gy[ti]);
                g.u[ti] = g.u[ti] + gv * d[ci];
                g.d[ci] = g.d[ci] + gv * uv;
                let h_now = &states[ti * n..(ti + 1) * n];
                for j in 0..n {
                    let aj = ac[j];
                    let h_prev = if k > 0 { states[(ti - ch) * n + j] } else { z };
                    g.c[t * n + j] = g.c[t * n + j] + gv * h_now[j];
                    dh[j] = dh[j] + gv * c[t * n + j];
                    let a_bar = (dt * aj).exp();
                    let bj = b[t * n + j];
                    let d_abar = dh[j] * h_prev;
                    let d_bbar = dh[j] * uv;
                    let (coeff, dcoeff_ddt, dcoeff_da) = if exact_zoh {
                        if aj.abs() < T::of(1e-12) {
                            (dt, T::one(), z)
                        } else {
                            let em1 = a_bar - T::one();
                            (em1 / aj, a_bar, (dt * a_bar * aj - em1) / (aj * aj))
                        }
                    } else {
                        (dt, T::one(), z)
                    };
                    g.u[ti] = g.u[ti] + dh[j] * coeff * bj;
                    g.delta[ti] = g.delta[ti] + d_abar * a_bar * aj + d_bbar * bj * dcoeff_ddt;
                    g.a[ci * n + j] = g.a[ci * n + j] + d_abar * a_bar * dt + d_bbar * bj * dcoeff_da;
                    g.b[t * n + j] = g.b[t * n + j] + d_bbar * coeff;
                    dh[j] = dh[j] * a_bar;
                }
            }
        }
    }
    g
}

/// S6 over a batch of token sequences `x: [B, L, C]` on the tape.
pub fn s6_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SsmVars, exact_zoh: bool) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Invalid {
            op: "s6_forward",
            msg: format!("expected [B, L, C], got {s:?}"),
        });
    }
    let (bsz, l, ch) = (s[0], s[1], s[2]);
    let n = tape.shape(p.w_b)[1];
    let flat = tape.reshape(x, &[bsz * l, ch])?;
    let bm = tape.matmul(flat, p.w_b)?;
    let bm = tape.reshape(bm, &[bsz, l, n])?;
    let cm = tape.matmul(flat, p.w_c)?;
    let cm = tape.reshape(cm, &[bsz, l, n])?;
    let dt = tape.matmul(flat, p.w_dt)?;
    let dt = tape.add(dt, p.b_dt)?;
    let dt = tape.softplus(dt);
    let dt = tape.reshape(dt, &[bsz, l, ch])?;
    let ea = tape.exp(p.a_log);
    let a = tape.neg(ea);
    tape.selective_scan(x, dt, a, bm, cm, p.d, exact_zoh)
}
