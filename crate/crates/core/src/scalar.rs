//! Floating-point scalar abstraction shared by every numeric module.
//!
//! Training runs in `f32`; the `f64` instantiation exists so that gradient
//! checks against finite differences can use tight tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real scalar usable as tensor element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (never fails for finite input).
    fn of(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
