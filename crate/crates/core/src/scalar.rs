//! Scalar abstraction shared by every kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the kernels are generic over: `f32` or `f64`.
///
/// Oracle comparisons at 1e-12 only make sense for `f64`; `f32` is supported
/// for the kernels themselves.
pub trait Real:
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
    /// Converts an `f64` literal. Never fails for finite inputs.
    #[inline(always)]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline(always)]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in a float")
    }

    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm2<S: Real>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub(crate) fn norm_inf<S: Real>(a: &[S]) -> S {
    a.iter().fold(S::zero(), |acc, &x| acc.max(x.abs()))
}

/// `y += alpha * x`
pub(crate) fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
