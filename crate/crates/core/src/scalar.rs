use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Real scalar usable by the tensor and geometry code.
///
/// Implemented for `f32` and `f64`; the predictors and experiment
/// pipelines run on `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal, panicking only for types that cannot
    /// represent ordinary finite constants.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
