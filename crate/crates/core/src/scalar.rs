//! Scalar abstraction for the numeric core.
//!
//! All dense math (embedding tables, memory keys, PCA, losses, trigram
//! counts) is generic over [`Scalar`] so the same code runs in f32 or f64.
//! The engine and CLI use the f64 aliases exported from the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by the numeric core.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Copy + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Copy
        + Send
        + Sync
        + 'static
{
}

/// Convert an f64 constant into the working scalar type.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 constant must convert into the scalar type")
}

/// Lossy view of a scalar as f64, for reports and serialization.
#[inline]
pub fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().expect("scalar must convert to f64")
}
