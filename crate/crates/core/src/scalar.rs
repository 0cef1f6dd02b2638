use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for embeddings, centroids and similarities.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; out-of-range inputs saturate.
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_single(v: f32) -> Self;

    fn to_single(self) -> f32;
}

impl Scalar for f32 {
    fn from_single(v: f32) -> Self {
        v
    }

    fn to_single(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_single(v: f32) -> Self {
        v as f64
    }

    fn to_single(self) -> f32 {
        self as f32
    }
}
