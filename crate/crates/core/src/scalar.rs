//! Scalar types accepted by tensors and the tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` and `f64`. Oracle and gradient suites run at `f64`;
/// `f32` is there for training demos where memory and speed matter more than
/// the last digits.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short name used in reports (`"f32"` / `"f64"`).
    const NAME: &'static str;

    /// Worst-case absolute difference tolerated when two algebraically
    /// equivalent routes are compared at this precision.
    const ORACLE_TOL: f64;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every scalar type")
    }

    fn from_count(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize is representable in every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const ORACLE_TOL: f64 = 1e-4;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const ORACLE_TOL: f64 = 1e-10;
}

/// Runtime selector for the scalar type, used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => f32::NAME,
            DType::F64 => f64::NAME,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(crate::Error::Usage(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}
