//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that take [`Var`] handles and append a node; the
//! node list is therefore already in topological order and [`Tape::backward`]
//! is a single reverse sweep. Leaves created with `requires_grad` accumulate
//! their gradient across backward calls until [`Tape::zero_grad`].

mod gradcheck;
mod kernels;

use std::sync::Arc;

pub use gradcheck::{grad_check, grad_check_all, GradCheckError};

use crate::fft;
use crate::ssm;
use crate::tensor::{is_pow2, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map applied per batch item, differentiated through its
/// adjoint. Used for measurement operators such as the fan-beam projector.
pub trait LinearOperator<T>: Send + Sync {
    fn in_shape(&self) -> Vec<usize>;
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T], out: &mut [T]);
    fn adjoint(&self, y: &[T], out: &mut [T]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Softplus,
    Exp,
    Sqrt,
    Abs,
    Sigmoid,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            pad,
            groups,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Conv2d(Var, Var, Conv2dSpec),
    DepthToSpace(Var, usize),
    LayerNorm(Var, Vec<T>),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Fft2(Var, bool),
    Scan(ScanNode<T>),
    Linear(Var, Arc<dyn LinearOperator<T>>),
}

struct ScanNode<T> {
    inputs: [Var; 6],
    exact_zoh: bool,
    states: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// `rhs` broadcasts into `lhs` when it is a trailing suffix of it (or a
/// single element).
fn suffix_broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    let n: usize = rhs.iter().product();
    if n == 1 {
        return true;
    }
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let name = ["add", "sub", "mul", "div"][kind as usize];
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcasts(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let m = bv.len();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % m];
                match kind {
                    0 => x + y,
                    1 => x - y,
                    2 => x * y,
                    _ => x / y,
                }
            })
            .collect();
        let t = Tensor::new(sa, out)?;
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 3)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let t = Tensor::new(&[sa[0], sb[1]], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// NHWC convolution. `w` is `[kh, kw, cin/groups, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = kernels::ConvGeom::new(&sx, &sw, spec).ok_or_else(|| mismatch("conv2d", &sx, &sw))?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d(x, w, spec), rg))
    }

    /// Sub-pixel rearrangement `[B, H, W, p*p*c] -> [B, H*p, W*p, c]`; the
    /// channel index is `(dy * p + dx) * c + ch`.
    pub fn depth_to_space(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || p == 0 || !s[3].is_multiple_of(p * p) {
            return Err(invalid("depth_to_space", format!("shape {s:?} with block {p}")));
        }
        let c = s[3] / (p * p);
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::depth_to_space(self.value(x).data(), &mut out, &s, p, false);
        let t = Tensor::new(&[s[0], s[1] * p, s[2] * p, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::DepthToSpace(x, p), rg))
    }

    /// Normalises over the last axis without affine parameters. Rows whose
    /// variance is below `1e-12` map to zero.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        let (out, inv) = kernels::layer_norm(self.value(x).data(), n);
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LayerNorm(x, inv), rg))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x).map(|v| kernels::unary(kind, v));
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, kind), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv[base + i];
                }
            }
        }
        let mut os = s.clone();
        os.remove(axis);
        if os.is_empty() {
            os.push(1);
        }
        let t = Tensor::new(&os, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAxis(x, axis), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut os = first;
        os[axis] = total;
        let t = Tensor::new(&os, out)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(invalid("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut os = s;
        os[axis] = end - start;
        let t = Tensor::new(&os, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice(x, axis, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} for shape {s:?}")));
        }
        let (out, os) = kernels::permute(self.value(x).data(), &s, perm);
        let t = Tensor::new(&os, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Row gather: `x` is viewed as `[rows, inner]` with `inner` its last
    /// extent; output row `i` is input row `index[i]`. `out_shape` must hold
    /// `index.len() * inner` elements and end in `inner`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner = *s.last().unwrap_or(&1);
        let rows = self.value(x).len() / inner.max(1);
        if out_shape.last() != Some(&inner)
            || out_shape.iter().product::<usize>() != index.len() * inner
            || index.iter().any(|&r| r >= rows)
        {
            return Err(mismatch("gather_rows", &s, out_shape));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &r in index.iter() {
            out.extend_from_slice(&d[r * inner..(r + 1) * inner]);
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather(x, index), rg))
    }

    /// Transpose of [`Tape::gather_rows`]: input row `i` is added into output
    /// row `index[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner = *s.last().unwrap_or(&1);
        let out_rows = out_shape.iter().product::<usize>() / inner.max(1);
        if out_shape.last() != Some(&inner)
            || index.len() * inner != self.value(x).len()
            || index.iter().any(|&r| r >= out_rows)
        {
            return Err(mismatch("scatter_add_rows", &s, out_shape));
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); out_rows * inner];
        for (i, &r) in index.iter().enumerate() {
            for k in 0..inner {
                out[r * inner + k] = out[r * inner + k] + d[i * inner + k];
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScatterAdd(x, index), rg))
    }

    /// Orthonormal 2-D FFT over axes `[-3, -2]` of a `[.., H, W, 2]` tensor.
    pub fn fft2(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || s[s.len() - 1] != 2 {
            return Err(invalid("fft2", format!("expected [.., H, W, 2], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
        if !is_pow2(h) || !is_pow2(w) {
            return Err(TensorError::NotPowerOfTwo { h, w });
        }
        let mut d = self.value(x).data().to_vec();
        fft::fft2_batch(&mut d, h, w, inverse);
        let t = Tensor::new(&s, d)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Fft2(x, inverse), rg))
    }

    /// Fused selective scan. Shapes: `u, delta: [B, L, C]`, `a: [C, N]`,
    /// `b, c: [B, L, N]`, `d: [C]`. Returns `[B, L, C]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        exact_zoh: bool,
    ) -> Result<Var> {
        let dims = ssm::ScanDims::infer(
            self.shape(u),
            self.shape(delta),
            self.shape(a),
            self.shape(b),
            self.shape(c),
            self.shape(d),
        )?;
        let mut states = vec![T::zero(); dims.batch * dims.len * dims.channels * dims.n_state];
        let y = ssm::scan_kernel(
            &dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            exact_zoh,
            Some(&mut states),
        );
        let t = Tensor::new(&[dims.batch, dims.len, dims.channels], y)?;
        let inputs = [u, delta, a, b, c, d];
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::Scan(ScanNode {
                inputs,
                exact_zoh,
                states,
            }),
            rg,
        ))
    }

    /// Applies `op` to each batch item of `x` (`[B, ..in_shape]`).
    pub fn linear_op(&mut self, x: Var, op: Arc<dyn LinearOperator<T>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ins = op.in_shape();
        if s.len() != ins.len() + 1 || s[1..] != ins[..] {
            return Err(mismatch("linear_op", &s, &ins));
        }
        let outs = op.out_shape();
        let (ni, no) = (ins.iter().product::<usize>(), outs.iter().product::<usize>());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * no];
        for (xi, yo) in xv.chunks_exact(ni).zip(out.chunks_exact_mut(no)) {
            op.apply(xi, yo);
        }
        let mut os = vec![s[0]];
        os.extend(outs);
        let t = Tensor::new(&os, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Linear(x, op), rg))
    }

    /// Reverse sweep from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let m = gb.len();
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % m] = gb[k % m] + sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                acc(*a, &mut |ga| {
                    for (k, &gv) in g.iter().enumerate() {
                        ga[k] = ga[k] + gv * bv[k % m];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % m] = gb[k % m] + gv * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                acc(*a, &mut |ga| {
                    for (k, &gv) in g.iter().enumerate() {
                        ga[k] = ga[k] + gv / bv[k % m];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, &gv) in g.iter().enumerate() {
                        let d = bv[k % m];
                        gb[k % m] = gb[k % m] - gv * av[k] / (d * d);
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + *s * b;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::matmul_grad_a(g, bv, ga, m, k, n));
                acc(*b, &mut |gb| kernels::matmul_grad_b(av, g, gb, m, k, n));
            }
            Op::Conv2d(x, w, spec) => {
                let geom = kernels::ConvGeom::new(self.shape(*x), self.shape(*w), *spec).expect("validated in forward");
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |gx| kernels::conv2d_grad_input(g, wv, gx, &geom));
                acc(*w, &mut |gw| kernels::conv2d_grad_weight(xv, g, gw, &geom));
            }
            Op::DepthToSpace(x, p) => {
                let s = self.shape(*x).to_vec();
                acc(*x, &mut |gx| kernels::depth_to_space(g, gx, &s, *p, true));
            }
            Op::LayerNorm(x, inv) => {
                let n = *self.shape(*x).last().expect("non-scalar");
                acc(*x, &mut |gx| kernels::layer_norm_grad(g, y, inv, gx, n));
            }
            Op::Unary(x, kind) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * kernels::unary_deriv(*kind, xv[k], y[k]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].value.len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v = *v + g[0] / n));
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                let idx = (o * n + k) * inner + i;
                                gx[idx] = gx[idx] + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    acc(v, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut gx[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let m = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + m) * inner];
                        add_into(dst, &g[o * m * inner..(o + 1) * m * inner]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = kernels::permute(g, node.value.shape(), &inv);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Gather(x, index) => {
                let inner = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |gx| {
                    for (i, &r) in index.iter().enumerate() {
                        add_into(&mut gx[r * inner..(r + 1) * inner], &g[i * inner..(i + 1) * inner]);
                    }
                });
            }
            Op::ScatterAdd(x, index) => {
                let inner = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |gx| {
                    for (i, &r) in index.iter().enumerate() {
                        add_into(&mut gx[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner]);
                    }
                });
            }
            Op::Fft2(x, inverse) => {
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
                let mut back = g.to_vec();
                fft::fft2_batch(&mut back, h, w, !inverse);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Scan(scan) => {
                let [u, delta, a, b, c, d] = scan.inputs;
                let dims = ssm::ScanDims::infer(
                    self.shape(u),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d),
                )
                .expect("validated in forward");
                let gr = ssm::scan_kernel_backward(
                    &dims,
                    val(u),
                    val(delta),
                    val(a),
                    val(b),
                    val(c),
                    val(d),
                    scan.exact_zoh,
                    &scan.states,
                    g,
                );
                acc(u, &mut |gx| add_into(gx, &gr.u));
                acc(delta, &mut |gx| add_into(gx, &gr.delta));
                acc(a, &mut |gx| add_into(gx, &gr.a));
                acc(b, &mut |gx| add_into(gx, &gr.b));
                acc(c, &mut |gx| add_into(gx, &gr.c));
                acc(d, &mut |gx| add_into(gx, &gr.d));
            }
            Op::Linear(x, op) => {
                let ni: usize = op.in_shape().iter().product();
                let no: usize = op.out_shape().iter().product();
                let mut back = vec![T::zero(); self.nodes[x.0].value.len()];
                for (gy, gx) in g.chunks_exact(no).zip(back.chunks_exact_mut(ni)) {
                    op.adjoint(gy, gx);
                }
                acc(*x, &mut |gx| add_into(gx, &back));
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)` (identity above 20).
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    kernels::softplus(x)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}
