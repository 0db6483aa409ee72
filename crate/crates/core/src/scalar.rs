//! Scalar abstraction shared by all geometry code.
//!
//! Everything numeric in this crate is generic over [`Real`], which is
//! implemented for `f32` and `f64`. File formats fix their own precision and
//! convert at the boundary.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating point scalar usable by every algorithm in the crate.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Machine epsilon of the concrete type.
    fn eps() -> Self;
}

impl Real for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Real for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Widens `x` to `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Converts between two scalar types through `f64`.
#[inline]
pub fn cast<S: Real, T: Real>(x: S) -> T {
    lit(to_f64(x))
}
