use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point element type of the networks. Training runs in `f32`;
/// gradient checks instantiate the same code in `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("representable constant")
    }

    fn to_f64_lossless(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite float")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `tanh` through a single exponential; saturates cleanly at ±1.
#[inline]
pub fn tanh<F: Real>(x: F) -> F {
    let two = F::one() + F::one();
    F::one() - two / ((x + x).exp() + F::one())
}
