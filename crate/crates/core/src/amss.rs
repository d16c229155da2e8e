//! Arbitrary-masked S6 (AMS6) and the enclosing AMSS block.
//!
//! A token grid is unrolled into four sequences (rows or columns, starting
//! top-left or bottom-right). A random subset of `s in {0, 1, 2, 3}` of
//! those sequences is zeroed, every sequence goes through the S6 module,
//! and the survivors are inverse-permuted and averaged back onto the grid.
//! Averaging over survivors keeps the activation scale independent of `s`.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::nn;
use crate::params::{fan_in, Bound, ParamId, ParamStore};
use crate::rng;
use crate::ssm::{self, SsmIds, SsmParams, SsmVars};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// The four unrolling orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScanOrder {
    /// Row-major from the top-left.
    RowTl = 0,
    /// Column-major from the top-left.
    ColTl = 1,
    /// Reverse of `RowTl`.
    RowBr = 2,
    /// Reverse of `ColTl`.
    ColBr = 3,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [ScanOrder::RowTl, ScanOrder::ColTl, ScanOrder::RowBr, ScanOrder::ColBr];

    /// `perm[k]` is the row-major grid index visited at sequence position `k`.
    pub fn permutation(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col = |k: usize| (k % h) * w + k / h;
        (0..l)
            .map(|k| match self {
                ScanOrder::RowTl => k,
                ScanOrder::ColTl => col(k),
                ScanOrder::RowBr => l - 1 - k,
                ScanOrder::ColBr => col(l - 1 - k),
            })
            .collect()
    }

    pub fn inverse_permutation(self, h: usize, w: usize) -> Vec<usize> {
        let p = self.permutation(h, w);
        let mut inv = vec![0; p.len()];
        for (k, &g) in p.iter().enumerate() {
            inv[g] = k;
        }
        inv
    }
}

/// Four directional copies of an `H x W x C` grid, each `[L, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanBundle<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub seqs: [Tensor<T>; 4],
}

/// Which scans one stochastic pass zeroed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub s: usize,
    /// Sorted, distinct.
    pub masked: Vec<ScanOrder>,
    /// Stream id the draw came from.
    pub stream: u64,
}

impl MaskDraw {
    pub fn none() -> Self {
        MaskDraw {
            s: 0,
            masked: Vec::new(),
            stream: 0,
        }
    }

    pub fn is_masked(&self, o: ScanOrder) -> bool {
        self.masked.contains(&o)
    }

    /// Merge weight of direction `o`: `1 / (4 - s)` for survivors, 0 otherwise.
    pub fn weight(&self, o: ScanOrder) -> f64 {
        if self.is_masked(o) {
            0.0
        } else {
            1.0 / (4 - self.s) as f64
        }
    }
}

/// Position of one mask draw in the keyed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskKey {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
    pub block: u64,
}

/// Draws `s ~ U{0..3}` and then `s` distinct directions uniformly. Inactive
/// masking always yields `s = 0`.
pub fn draw_mask(key: MaskKey, active: bool) -> MaskDraw {
    if !active {
        return MaskDraw::none();
    }
    let parts = [rng::domain::MASK, key.step, key.sample, key.block];
    let mut r = rng::keyed(key.seed, &parts);
    let s = r.random_range(0..4usize);
    let mut masked: Vec<ScanOrder> = index::sample(&mut r, 4, s).into_iter().map(|i| ScanOrder::ALL[i]).collect();
    masked.sort();
    MaskDraw {
        s,
        masked,
        stream: rng::stream_id(&parts),
    }
}

pub fn scan_expand<T: Scalar>(grid: &Tensor<T>) -> Result<ScanBundle<T>> {
    let s = grid.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(TensorError::Invalid {
            op: "scan_expand",
            msg: format!("expected [H, W, C], got {s:?}"),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = grid.data();
    let seqs = ScanOrder::ALL.map(|o| {
        let data = o
            .permutation(h, w)
            .iter()
            .flat_map(|&g| d[g * c..(g + 1) * c].iter().copied())
            .collect();
        Tensor::new(&[h * w, c], data).expect("permutation preserves size")
    });
    Ok(ScanBundle { h, w, c, seqs })
}

/// Zeroes the drawn scans (shapes unchanged).
pub fn arbitrary_mask<T: Scalar>(bundle: &ScanBundle<T>, key: MaskKey, active: bool) -> (ScanBundle<T>, MaskDraw) {
    let draw = draw_mask(key, active);
    let mut out = bundle.clone();
    for &o in &draw.masked {
        out.seqs[o as usize].data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    (out, draw)
}

/// Inverse-permutes the surviving scans and averages them.
pub fn scan_merge<T: Scalar>(bundle: &ScanBundle<T>, draw: &MaskDraw) -> Result<Tensor<T>> {
    let (h, w, c) = (bundle.h, bundle.w, bundle.c);
    if draw.s > 3 || draw.masked.len() != draw.s {
        return Err(TensorError::Invalid {
            op: "scan_merge",
            msg: format!("inconsistent mask draw {draw:?}"),
        });
    }
    let mut out = vec![T::zero(); h * w * c];
    for o in ScanOrder::ALL {
        if draw.is_masked(o) {
            continue;
        }
        let seq = bundle.seqs[o as usize].data();
        for (k, &g) in o.permutation(h, w).iter().enumerate() {
            for j in 0..c {
                out[g * c + j] = out[g * c + j] + seq[k * c + j];
            }
        }
    }
    let inv = T::of(1.0 / (4 - draw.s) as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(&[h, w, c], out)
}

/// AMS6 on the tape with an arbitrary per-sequence processor `process`,
/// which receives `[4B, L, C]` (direction-major) and must preserve shape.
pub fn ams6_with<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    draws: &[MaskDraw],
    process: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 4 || s[0] != draws.len() {
        return Err(TensorError::Invalid {
            op: "ams6",
            msg: format!("grid {s:?} with {} mask draws", draws.len()),
        });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let l = h * w;
    let perms = ScanOrder::ALL.map(|o| o.permutation(h, w));
    let zero_row = b * l;

    // expand + mask: masked sequences gather an appended zero row
    let flat = tape.reshape(grid, &[b * l, c])?;
    let zero = tape.constant(Tensor::zeros(&[1, c]));
    let padded = tape.concat(&[flat, zero], 0)?;
    let mut gather = Vec::with_capacity(4 * b * l);
    for (d, o) in ScanOrder::ALL.iter().enumerate() {
        for (bi, draw) in draws.iter().enumerate() {
            if draw.is_masked(*o) {
                gather.extend(std::iter::repeat_n(zero_row, l));
            } else {
                gather.extend(perms[d].iter().map(|&g| bi * l + g));
            }
        }
    }
    let seqs = tape.gather_rows(padded, Arc::new(gather), &[4 * b, l, c])?;

    let y = process(tape, seqs)?;
    if tape.shape(y) != [4 * b, l, c] {
        return Err(TensorError::ShapeMismatch {
            op: "ams6",
            lhs: vec![4 * b, l, c],
            rhs: tape.shape(y).to_vec(),
        });
    }

    // merge: weight survivors by 1/(4-s), masked by 0, then scatter home
    let mut wts = Vec::with_capacity(4 * b * l * c);
    for o in ScanOrder::ALL {
        for draw in draws {
            let wv = T::of(draw.weight(o));
            wts.extend(std::iter::repeat_n(wv, l * c));
        }
    }
    let wts = tape.constant(Tensor::new(&[4 * b, l, c], wts)?);
    let y = tape.mul(y, wts)?;
    let mut scatter = Vec::with_capacity(4 * b * l);
    for p in &perms {
        for bi in 0..b {
            scatter.extend(p.iter().map(|&g| bi * l + g));
        }
    }
    tape.scatter_add_rows(y, Arc::new(scatter), &[b, h, w, c])
}

/// AMS6 with the S6 module. `ssm` holds one shared parameter set or four
/// per-direction sets (in [`ScanOrder::ALL`] order).
pub fn ams6_forward<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    ssm: &[SsmVars],
    draws: &[MaskDraw],
    exact_zoh: bool,
) -> Result<Var> {
    ams6_with(tape, grid, draws, |tape, seqs| match ssm {
        [shared] => ssm::s6_forward(tape, seqs, shared, exact_zoh),
        [_, _, _, _] => {
            let b = tape.shape(seqs)[0] / 4;
            let mut outs = Vec::with_capacity(4);
            for (d, p) in ssm.iter().enumerate() {
                let part = tape.slice(seqs, 0, d * b, (d + 1) * b)?;
                outs.push(ssm::s6_forward(tape, part, p, exact_zoh)?);
            }
            tape.concat(&outs, 0)
        }
        _ => Err(TensorError::Invalid {
            op: "ams6",
            msg: format!("expected 1 or 4 SSM parameter sets, got {}", ssm.len()),
        }),
    })
}

/// Parameter locations of one AMSS block.
#[derive(Clone, Debug)]
pub struct AmssBlockIds {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub gate_in_w: ParamId,
    pub gate_in_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ssm: Vec<SsmIds>,
    pub post_g: ParamId,
    pub post_b: ParamId,
    pub sec_w: ParamId,
    pub sec_b: ParamId,
    pub gate_out_w: ParamId,
    pub gate_out_b: ParamId,
}

/// Shape hyperparameters of an AMSS block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmssDims {
    pub channels: usize,
    pub expansion: usize,
    pub n_state: usize,
    pub per_direction: bool,
}

impl AmssDims {
    pub fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    /// Closed-form scalar count of one block.
    pub fn param_count(&self) -> usize {
        let (c, ci, n) = (self.channels, self.inner(), self.n_state);
        let ssm = ci * n * 3 + ci * ci + 2 * ci;
        let n_ssm = if self.per_direction { 4 } else { 1 };
        2 * c + (c * ci + ci) + (9 * ci + ci) + n_ssm * ssm + 2 * ci + (c * ci + ci) + (ci * c + c)
    }
}

impl AmssBlockIds {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dims: AmssDims, rng: &mut R) -> Self {
        let (c, ci) = (dims.channels, dims.inner());
        let n_ssm = if dims.per_direction { 4 } else { 1 };
        let norm_g = store.add(format!("{prefix}.norm.g"), Tensor::full(&[c], T::one()));
        let norm_b = store.add(format!("{prefix}.norm.b"), Tensor::zeros(&[c]));
        let gate_in_w = store.add(format!("{prefix}.gate_in.w"), fan_in(rng, &[c, ci], c));
        let gate_in_b = store.add(format!("{prefix}.gate_in.b"), Tensor::zeros(&[ci]));
        let dw_w = store.add(format!("{prefix}.dwconv.w"), fan_in(rng, &[3, 3, 1, ci], 9));
        let dw_b = store.add(format!("{prefix}.dwconv.b"), Tensor::zeros(&[ci]));
        let ssm = (0..n_ssm)
            .map(|d| SsmParams::init(ci, dims.n_state, rng).register(store, &format!("{prefix}.ssm{d}")))
            .collect();
        let post_g = store.add(format!("{prefix}.post_norm.g"), Tensor::full(&[ci], T::one()));
        let post_b = store.add(format!("{prefix}.post_norm.b"), Tensor::zeros(&[ci]));
        let sec_w = store.add(format!("{prefix}.secondary.w"), fan_in(rng, &[c, ci], c));
        let sec_b = store.add(format!("{prefix}.secondary.b"), Tensor::zeros(&[ci]));
        let gate_out_w = store.add(format!("{prefix}.gate_out.w"), fan_in(rng, &[ci, c], ci));
        let gate_out_b = store.add(format!("{prefix}.gate_out.b"), Tensor::zeros(&[c]));
        AmssBlockIds {
            norm_g,
            norm_b,
            gate_in_w,
            gate_in_b,
            dw_w,
            dw_b,
            ssm,
            post_g,
            post_b,
            sec_w,
            sec_b,
            gate_out_w,
            gate_out_b,
        }
    }

    pub fn ssm_vars(&self, bound: &Bound) -> Vec<SsmVars> {
        self.ssm
            .iter()
            .map(|s| SsmVars {
                a_log: bound.var(s.a_log),
                d: bound.var(s.d),
                w_b: bound.var(s.w_b),
                w_c: bound.var(s.w_c),
                w_dt: bound.var(s.w_dt),
                b_dt: bound.var(s.b_dt),
            })
            .collect()
    }
}

/// `x + gate_out(postnorm(ams6(silu(dwconv(gate_in(z))))) * silu(secondary(z)))`
/// with `z = prenorm(x)`; `x` is `[B, H, W, C]`.
pub fn amss_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ids: &AmssBlockIds,
    bound: &Bound,
    draws: &[MaskDraw],
    exact_zoh: bool,
) -> Result<Var> {
    let v = |id| bound.var(id);
    let z = nn::layer_norm(tape, x, v(ids.norm_g), v(ids.norm_b))?;

    let p = nn::linear(tape, z, v(ids.gate_in_w), v(ids.gate_in_b))?;
    let ci = tape.shape(p)[3];
    let p = nn::conv2d(tape, p, v(ids.dw_w), v(ids.dw_b), Conv2dSpec::new(1, 1, ci))?;
    let p = tape.silu(p);
    let p = ams6_forward(tape, p, &ids.ssm_vars(bound), draws, exact_zoh)?;
    let p = nn::layer_norm(tape, p, v(ids.post_g), v(ids.post_b))?;

    let s = nn::linear(tape, z, v(ids.sec_w), v(ids.sec_b))?;
    let s = tape.silu(s);

    let m = tape.mul(p, s)?;
    let out = nn::linear(tape, m, v(ids.gate_out_w), v(ids.gate_out_b))?;
    tape.add(x, out)
}
