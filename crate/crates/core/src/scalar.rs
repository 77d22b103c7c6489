use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, NumAssignOps};

/// Floating point type the differentiable substrate is generic over.
///
/// Training runs in `f32`; gradient checks and attribute programs use `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + NumAssignOps
        + ScalarOperand
        + LinalgScalar
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}
