//! Minimal dense-tensor engine used by the denoising and recommendation
//! models.
//!
//! Values live in row-major [`Tensor`]s. Differentiable computations are
//! recorded on a [`Tape`]; calling [`Tape::backward`] on a scalar node
//! returns one gradient array per entry of the [`ParamStore`] the tape read
//! from. [`Adam`] consumes those gradients and [`grad_check`] compares them
//! with central finite differences.

mod adam;
mod csr;
mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use csr::Csr;
pub use error::NumericsError;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Floating point element type. Implemented for `f32` (training default)
/// and `f64` (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand for `T::from_f64_lossy`.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
