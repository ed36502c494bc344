//! Scalar abstraction shared by the model, the losses and the metrics.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point type the numeric core is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sign with `sign(0) == 0`, used as the subgradient of `|x|`.
#[inline]
pub fn signum0<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
