//! Scalar abstraction so the numerics run in either f32 or f64.
//!
//! Geometry, losses, and optimizer state always run in f64 (the widest
//! precision available here); the encoder forward/backward pass picks its
//! scalar from [`crate::config::Precision`].

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the tensor and geometry code.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum<Self>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    fn to_f64_c(self) -> f64;
}

impl Real for f32 {
    fn to_f64_c(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }
}
