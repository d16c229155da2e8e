//! Small layer helpers over the tape. Activations are NHWC throughout.

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::tensor::{Result, Scalar};

/// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (din, dout) = (tape.shape(w)[0], tape.shape(w)[1]);
    let rows = tape.value(x).len() / din.max(1);
    let flat = tape.reshape(x, &[rows, din])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let mut os = s;
    *os.last_mut().expect("non-scalar") = dout;
    tape.reshape(y, &os)
}

/// Layer norm over the last axis followed by a per-channel scale and shift.
pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
    let y = tape.conv2d(x, w, spec)?;
    tape.add(y, b)
}
