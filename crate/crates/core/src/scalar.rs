//! Scalar abstraction: the whole numeric core is generic over `Real`,
//! with `f32`/`f64` as the concrete instantiations (see the aliases at
//! the crate root).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the model, the unlearning engine, and
/// the audits. Checkpoints round-trip through `Display`/`FromStr`, which
/// is exact for the shortest-representation formatting of f32/f64.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + FromStr
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 literals and RNG draws.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Display
        + FromStr
        + Debug
        + Default
        + Send
        + Sync
        + 'static
{
}
