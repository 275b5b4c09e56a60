//! Dense tensors, a reverse-mode tape, and a seeded random stream.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in
//! `f32` for training and in `f64` for finite-difference verification.

pub mod gradcheck;
mod kernels;
mod rng;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use kernels::{conv2x2_s2, deconv2x2_s2, softmax, softmax_rows};
pub use rng::Prng;
pub use tape::{BackwardStatus, GumbelOptions, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
