use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Scalar type for all numeric kernels: `f32` for training, `f64` where
/// verification needs the extra precision.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f32`; identity for `f64`.
    fn to_f64_exact(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_exact(self) -> f64 {
        self
    }
}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn s64<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 converts to scalar")
}

/// Serial dot product with a fixed accumulation order (index 0 upward).
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// Euclidean norm with a fixed accumulation order.
#[inline]
pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}
