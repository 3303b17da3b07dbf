//! Scalar abstraction: every numeric routine in this crate is generic over
//! [`Real`], implemented for `f32` and `f64`. The crate-root aliases pin the
//! default 64-bit instantiation used by training, evaluation, and the CLI.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Real:
    Float + FromPrimitive + NumCast + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant. Panics if the value is not representable;
    /// only used for literal constants, never for data.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar convertible to f64")
    }

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform draw from [0, 1).
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.gen::<$t>()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
