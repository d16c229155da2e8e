//! Arbitrary-masked selective state-space reconstruction for accelerated
//! MRI and sparse-view CT.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape, the S6
//! selective scan, the four-direction masked scan block, the reconstruction
//! network, acquisition operators, training, metrics and file formats.

pub mod amss;
pub mod autodiff;
pub mod disc;
pub mod fft;
pub mod imaging;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use autodiff::{Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
