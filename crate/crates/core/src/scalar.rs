//! Floating-point abstraction used by the numeric kernels.
//!
//! Everything numerical in this crate (preprocessing, the regressors, the
//! backtest statistics) is written against [`Scalar`] so the same code runs
//! at `f32` or `f64` precision. The crate root exports `f64` aliases, which
//! is what the command-line pipeline uses; `f32` is mainly useful for
//! memory-constrained experiments.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::num::ParseFloatError;
use std::str::FromStr;

/// Native float type the numeric code is generic over.
///
/// Beyond `num_traits::Float` this requires conversions from primitives
/// (for counts and literals), summation, and exact text round-tripping:
/// `Display` for `f32`/`f64` prints the shortest decimal string that parses
/// back to the identical bit pattern, which the model and dataset writers
/// rely on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Sum
    + for<'a> Sum<&'a Self>
    + Display
    + LowerExp
    + Debug
    + FromStr<Err = ParseFloatError>
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values a float cannot
    /// hold, which never happens for the finite constants used here.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal")
    }

    /// Converts a count (sample sizes, denominators).
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(v: T) -> T {
        v.to_string().parse().expect("shortest form parses back")
    }

    #[test]
    fn display_round_trips_exactly() {
        for &v in &[0.1f64, -3.25e-17, 1.0 / 3.0, 2.0f64.powi(-40), 0.0, -0.0] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
        for &v in &[0.1f32, -7.3e-5, 1.0 / 3.0, 16_777_216.0] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn literal_and_count_conversions() {
        assert_eq!(f64::of(0.5), 0.5);
        assert_eq!(f32::of(0.5), 0.5);
        assert_eq!(f64::from_count(18), 18.0);
    }
}
