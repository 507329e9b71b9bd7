//! Floating-point abstraction so every kernel runs in f32 (training speed)
//! or f64 (finite-difference gradient checks) from a single implementation.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type for all tensors. `f32` is the training width, `f64` the
/// verification width; both must produce the same code paths.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lift an `f64` literal into this width. Constants throughout the model
    /// are written as f64 and converted once, so both widths round the same
    /// source values.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal converts to any float width")
    }

    /// Widen to f64 for logging, metrics, and gradient comparison.
    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
