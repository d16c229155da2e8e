//! Raw forward/backward loops behind the tape primitives.

use super::{Conv2dSpec, Unary};
use crate::tensor::Scalar;

pub(super) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

// dA = dY . B^T
pub(super) fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s: T = gr.iter().zip(&b[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
            ga[i * k + p] = ga[i * k + p] + s;
        }
    }
}

// dB = A^T . dY
pub(super) fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o = *o + av * gv;
            }
        }
    }
}

pub(super) struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    pub(super) fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || spec.stride == 0 || spec.groups == 0 {
            return None;
        }
        let (b, h, wd, cin) = (x[0], x[1], x[2], x[3]);
        let (kh, kw, cin_g, cout) = (w[0], w[1], w[2], w[3]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return None;
        }
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return None;
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        Some(ConvGeom {
            b,
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            ho,
            wo,
            spec,
        })
    }

    pub(super) fn out_shape(&self) -> [usize; 4] {
        [self.b, self.ho, self.wo, self.cout]
    }

    /// Calls `f(x_offset, out_offset, ky, kx)` for every valid tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.spec.stride as isize, self.spec.pad as isize);
        for b in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let o_off = ((b * self.ho + oy) * self.wo + ox) * self.cout;
                    for ky in 0..self.kh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let x_off = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(x_off, o_off, ky, kx);
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let [b, ho, wo, cout] = g.out_shape();
    let mut out = vec![T::zero(); b * ho * wo * cout];
    let groups = g.spec.groups;
    let (cin_g, cout_g) = (g.cin / groups, cout / groups);
    g.for_each_tap(|xo, oo, ky, kx| {
        let w_tap = (ky * g.kw + kx) * cin_g * cout;
        for grp in 0..groups {
            for ci in 0..cin_g {
                let xv = x[xo + grp * cin_g + ci];
                let wr = &w[w_tap + ci * cout + grp * cout_g..w_tap + ci * cout + (grp + 1) * cout_g];
                let orow = &mut out[oo + grp * cout_g..oo + (grp + 1) * cout_g];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o = *o + xv * wv;
                }
            }
        }
    });
    out
}

pub(super) fn conv2d_grad_input<T: Scalar>(gy: &[T], w: &[T], gx: &mut [T], g: &ConvGeom) {
    let groups = g.spec.groups;
    let (cin_g, cout_g) = (g.cin / groups, g.cout / groups);
    g.for_each_tap(|xo, oo, ky, kx| {
        let w_tap = (ky * g.kw + kx) * cin_g * g.cout;
        for grp in 0..groups {
            let grow = &gy[oo + grp * cout_g..oo + (grp + 1) * cout_g];
            for ci in 0..cin_g {
                let wr = &w[w_tap + ci * g.cout + grp * cout_g..w_tap + ci * g.cout + (grp + 1) * cout_g];
                let s: T = grow.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                gx[xo + grp * cin_g + ci] = gx[xo + grp * cin_g + ci] + s;
            }
        }
    });
}

pub(super) fn conv2d_grad_weight<T: Scalar>(x: &[T], gy: &[T], gw: &mut [T], g: &ConvGeom) {
    let groups = g.spec.groups;
    let (cin_g, cout_g) = (g.cin / groups, g.cout / groups);
    g.for_each_tap(|xo, oo, ky, kx| {
        let w_tap = (ky * g.kw + kx) * cin_g * g.cout;
        for grp in 0..groups {
            let grow = &gy[oo + grp * cout_g..oo + (grp + 1) * cout_g];
            for ci in 0..cin_g {
                let xv = x[xo + grp * cin_g + ci];
                let base = w_tap + ci * g.cout + grp * cout_g;
                for (o, &gv) in gw[base..base + cout_g].iter_mut().zip(grow) {
                    *o = *o + xv * gv;
                }
            }
        }
    });
}

/// Forward (`reverse == false`) copies `src` laid out as `shape` (the
/// depth form) into `dst`; with `reverse` it accumulates the space form
/// `src` back into the depth-form `dst`.
pub(super) fn depth_to_space<T: Scalar>(src: &[T], dst: &mut [T], shape: &[usize], p: usize, reverse: bool) {
    let (b, h, w, cd) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cd / (p * p);
    let (ws, hs) = (w * p, h * p);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let d_off = ((bi * h + y) * w + x) * cd;
                for dy in 0..p {
                    for dx in 0..p {
                        let s_off = ((bi * hs + y * p + dy) * ws + x * p + dx) * c;
                        let ch = (dy * p + dx) * c;
                        for k in 0..c {
                            if reverse {
                                dst[d_off + ch + k] = dst[d_off + ch + k] + src[s_off + k];
                            } else {
                                dst[s_off + k] = src[d_off + ch + k];
                            }
                        }
                    }
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-6;
const LN_ZERO_VAR: f64 = 1e-12;

pub(super) fn layer_norm<T: Scalar>(x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    let nf = T::of(n as f64);
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        if var < T::of(LN_ZERO_VAR) {
            inv.push(T::zero());
            continue;
        }
        let s = T::one() / (var + T::of(LN_EPS)).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

pub(super) fn layer_norm_grad<T: Scalar>(g: &[T], y: &[T], inv: &[T], gx: &mut [T], n: usize) {
    let nf = T::of(n as f64);
    for (r, &s) in inv.iter().enumerate() {
        if s == T::zero() {
            continue;
        }
        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
        let mg = gr.iter().copied().sum::<T>() / nf;
        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for k in 0..n {
            gx[r * n + k] = gx[r * n + k] + s * (gr[k] - mg - yr[k] * mgy);
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(super) fn unary<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Log => x.ln(),
    }
}

pub(super) fn unary_deriv<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Log => T::one() / x,
    }
}

pub(super) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; nd];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
