use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the dense kernels are generic over: f32 or f64.
///
/// The lineage pipeline itself runs in f64 (see the crate-root aliases);
/// the math modules stay scalar-agnostic.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    /// Converts a count into the scalar domain for use in denominators.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Converts an f64 constant (tolerances, literals) into the scalar domain.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
