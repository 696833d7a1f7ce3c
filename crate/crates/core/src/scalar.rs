//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the estimators are generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and file values.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable in every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Unbiased sample variance; zero for fewer than two values.
pub(crate) fn variance<T: Real>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_usize_lossy(xs.len() - 1)
}

pub(crate) fn pearson<T: Real>(a: &[T], b: &[T]) -> T {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    if denom <= T::zero() {
        T::zero()
    } else {
        sab / denom
    }
}
