//! Floating-point scalar abstraction used by the geometry layer.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point coordinate type: `f32` or `f64`.
///
/// The pipeline itself runs on `f64` (see the aliases at the crate root) so
/// that chained tile → image → world transforms keep full precision; `f32`
/// is supported for callers that hold detector output in single precision.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literal constants.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
