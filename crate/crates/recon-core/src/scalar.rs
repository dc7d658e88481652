//! Scalar abstraction: core math is generic over the floating-point type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
///
/// Training and the acceptance tolerances assume `f64`; `f32` is an
/// inference-time option.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant. Lossless for `f64`, rounds for `f32`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    /// Widens to `f64` for I/O, statistics, and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar fits in f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
