//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate (k-means, losses, the encoder) is generic
//! over [`Scalar`] so the same code runs in `f32` for speed and `f64` for
//! oracle and gradient-check tests. Concrete aliases live at the crate root.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and thresholds.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
