//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the tensor engine, model and losses are generic over.
///
/// Implemented for `f32` and `f64`. Training and all acceptance checks run in
/// `f64`; `f32` is available for inference experiments.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// Conversion of a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Short name written into checkpoint manifests.
    fn dtype_name() -> &'static str;
}

impl Scalar for f32 {
    fn dtype_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    fn dtype_name() -> &'static str {
        "f64"
    }
}
