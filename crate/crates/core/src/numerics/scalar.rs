//! Scalar abstraction over the two supported float widths.
//!
//! The whole engine is generic over [`Scalar`] so a pipeline is either
//! entirely f64 (tests, gradient oracles) or entirely f32 (training).
//! Precision is a property of the instantiation, never of an individual
//! tensor.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64 literals and intermediate host math.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }

    /// Conversion used at serialization boundaries (files store f32).
    fn as_f32(self) -> f32 {
        <Self as ToPrimitive>::to_f32(&self).expect("f32 conversion")
    }

    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 conversion")
    }

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
