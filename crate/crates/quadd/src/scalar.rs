//! Scalar abstraction for the numeric core.
//!
//! Tensor and quantizer math is generic over [`Scalar`]; the rest of the
//! pipeline uses the `f64` defaults re-exported at the crate root.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the tensor and quantizer core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + 'static
{
    fn cast_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize fits in scalar")
    }
    fn cast_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to scalar")
    }
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
