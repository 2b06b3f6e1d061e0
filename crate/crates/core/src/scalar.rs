//! Scalar abstraction shared by the tensor, tape and model code.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real number type the tape can differentiate through.
///
/// Implemented for `f32` and `f64`. Experiments run in `f64`; the `f32`
/// instantiation exists for memory-light inference and is exercised by tests.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Copy + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Little-endian byte width used by the checkpoint format.
    const BYTES: usize;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
}
