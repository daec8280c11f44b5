//! Scalar abstraction: all numeric kernels are generic over [`Scalar`],
//! instantiated at `f32` or `f64`. The pipeline itself runs at [`crate::Real`]
//! (`f64`) so gradient checks and cross-run reproducibility are exact.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by tensors, the tape and every model.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest representable value).
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening (or identity) conversion to `f64`.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }

    fn cast_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
