//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Everything the network needs is expressed as operations on a [`Tape`]:
//! a forward pass records nodes, [`Tape::backward`] replays them in reverse
//! and returns per-node gradients. Values are generic over [`Real`] so the
//! same model code runs in 32-bit for training and 64-bit for gradient
//! verification.

mod gradcheck;
mod init;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, relative_error, DEFAULT_FD_STEP};
pub use init::GaussianInit;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// sqrt(2/pi), the constant of the tanh GELU approximation.
pub const GELU_COEFF: f64 = 0.7978845608;

/// Scalar element type of a tensor: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {op} input")]
    NonFinite { op: &'static str },
    #[error("masked loss over an empty mask")]
    EmptyLoss,
    #[error("target id {target} at position {position} out of range for {vocab} classes")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
