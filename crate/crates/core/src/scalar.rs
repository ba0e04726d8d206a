//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the library is generic over: `f32` or `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static {
    /// Relative singular-value cutoff used for rank decisions.
    fn default_rank_tol() -> Self;

    /// Converts an `f64` literal. Panics only on values not representable at all (NaN is kept).
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    fn default_rank_tol() -> Self {
        1e-10
    }
}

impl Real for f32 {
    fn default_rank_tol() -> Self {
        1e-5
    }
}
