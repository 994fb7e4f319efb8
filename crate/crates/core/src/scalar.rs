//! Scalar abstraction for the pooling math.
//!
//! Pooling, stage aggregation and the analytic gradients only need field
//! arithmetic and an ordering, so they run unchanged on `f32`, `f64`,
//! double-double [`TwoFloat`] and exact rationals. The exponential used by
//! exp-softmax pooling is the only transcendental, and exact types report it
//! as unavailable.

use std::fmt::Debug;

use num_rational::{BigRational, Rational64};
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};
use twofloat::TwoFloat;

/// Numeric type accepted by the pooling and gradient routines.
pub trait Scalar:
    Num + Clone + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// `exp(self)`, or `None` when the type cannot represent it.
    fn checked_exp(&self) -> Option<Self>;

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits every supported scalar")
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every supported scalar")
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn two() -> Self {
        Self::one() + Self::one()
    }

    fn abs_value(&self) -> Self {
        if *self < Self::zero() {
            Self::zero() - self.clone()
        } else {
            self.clone()
        }
    }
}

macro_rules! float_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn checked_exp(&self) -> Option<Self> {
                Some(Float::exp(*self))
            }
        }
    )*};
}

float_scalar!(f32, f64, TwoFloat);

macro_rules! exact_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn checked_exp(&self) -> Option<Self> {
                None
            }
        }
    )*};
}

exact_scalar!(BigRational, Rational64);
