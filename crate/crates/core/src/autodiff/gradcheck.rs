//! Central finite-difference gradient checks (64-bit only).

use thiserror::Error;

use super::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-6, 1e-4]")]
    BadStep(f64),
    #[error("non-finite value at input {input}, coordinate {coord}")]
    NonFinite { input: usize, coord: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn eval<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Max over every coordinate of every input of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check_all<F>(f: F, xs: &[Tensor<f64>], step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(GradCheckError::BadStep(step));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).is_finite() {
        return Err(GradCheckError::NonFinite { input: 0, coord: 0 });
    }
    tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; xs[i].len()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = xs[i].data()[k];
            probe[i].data_mut()[k] = orig + step;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[k] = orig - step;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite { input: i, coord: k });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_all`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_all(|t, v| f(t, v[0]), std::slice::from_ref(x), step)
}
