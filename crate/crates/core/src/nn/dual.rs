//! Forward-mode scalars.
//!
//! [`Dual`] carries one tangent and computes exact directional derivatives in
//! a single pass. [`HDual`] carries two tangent slots plus the mixed second
//! derivative, which is what the probability-flow Jacobian trace needs when
//! the drift itself contains a time derivative of the transform network:
//! seeding slot 1 with a state direction and slot 2 with time makes `d12` the
//! state-derivative of the time-derivative.
//!
//! [`Lift`] abstracts over plain scalars, `Dual`, and `HDual`, so the network
//! and transform evaluations are written once and instantiated per mode.

use std::ops::{Add, Mul, Neg, Sub};

use crate::num::Real;

/// Scalar-like value supporting the handful of operations the networks use.
///
/// `chain` applies a scalar function given its value and first/second
/// derivative at `self.value()`; implementations propagate tangents by the
/// chain rule (plain scalars ignore the derivatives).
pub trait Lift<T: Real>:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn from_real(x: T) -> Self;
    fn value(self) -> T;
    /// `c * self` for a constant `c`.
    fn scale(self, c: T) -> Self;
    fn add_real(self, c: T) -> Self;
    fn chain(self, f: T, df: T, d2f: T) -> Self;

    fn sin(self) -> Self {
        let v = self.value();
        self.chain(v.sin(), v.cos(), -v.sin())
    }

    fn cos(self) -> Self {
        let v = self.value();
        self.chain(v.cos(), -v.sin(), -v.cos())
    }

    fn exp(self) -> Self {
        let e = self.value().exp();
        self.chain(e, e, e)
    }
}

impl<T: Real> Lift<T> for T {
    fn from_real(x: T) -> Self {
        x
    }

    fn value(self) -> T {
        self
    }

    fn scale(self, c: T) -> Self {
        c * self
    }

    fn add_real(self, c: T) -> Self {
        self + c
    }

    fn chain(self, f: T, _df: T, _d2f: T) -> Self {
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub v: T,
    pub d: T,
}

impl<T: Real> Dual<T> {
    pub fn new(v: T, d: T) -> Self {
        Dual { v, d }
    }

    pub fn constant(v: T) -> Self {
        Dual { v, d: T::zero() }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { v: -self.v, d: -self.d }
    }
}

impl<T: Real> Lift<T> for Dual<T> {
    fn from_real(x: T) -> Self {
        Dual::constant(x)
    }

    fn value(self) -> T {
        self.v
    }

    fn scale(self, c: T) -> Self {
        Dual { v: c * self.v, d: c * self.d }
    }

    fn add_real(self, c: T) -> Self {
        Dual { v: self.v + c, d: self.d }
    }

    fn chain(self, f: T, df: T, _d2f: T) -> Self {
        Dual { v: f, d: df * self.d }
    }
}

/// Two-tangent scalar with the mixed second derivative `d12`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HDual<T> {
    pub v: T,
    pub d1: T,
    pub d2: T,
    pub d12: T,
}

impl<T: Real> HDual<T> {
    pub fn new(v: T, d1: T, d2: T, d12: T) -> Self {
        HDual { v, d1, d2, d12 }
    }

    pub fn constant(v: T) -> Self {
        HDual { v, d1: T::zero(), d2: T::zero(), d12: T::zero() }
    }
}

impl<T: Real> Add for HDual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        HDual {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
            d12: self.d12 + o.d12,
        }
    }
}

impl<T: Real> Sub for HDual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        HDual {
            v: self.v - o.v,
            d1: self.d1 - o.d1,
            d2: self.d2 - o.d2,
            d12: self.d12 - o.d12,
        }
    }
}

impl<T: Real> Mul for HDual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        HDual {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + self.v * o.d2,
            d12: self.d12 * o.v + self.d1 * o.d2 + self.d2 * o.d1 + self.v * o.d12,
        }
    }
}

impl<T: Real> Neg for HDual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        HDual { v: -self.v, d1: -self.d1, d2: -self.d2, d12: -self.d12 }
    }
}

impl<T: Real> Lift<T> for HDual<T> {
    fn from_real(x: T) -> Self {
        HDual::constant(x)
    }

    fn value(self) -> T {
        self.v
    }

    fn scale(self, c: T) -> Self {
        HDual { v: c * self.v, d1: c * self.d1, d2: c * self.d2, d12: c * self.d12 }
    }

    fn add_real(self, c: T) -> Self {
        HDual { v: self.v + c, ..self }
    }

    fn chain(self, f: T, df: T, d2f: T) -> Self {
        HDual {
            v: f,
            d1: df * self.d1,
            d2: df * self.d2,
            d12: df * self.d12 + d2f * self.d1 * self.d2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Test function with non-trivial curvature in both slots:
    // f(x, t) = exp(sin(x * t)) + cos(t) * x
    fn f_plain(x: f64, t: f64) -> f64 {
        (x * t).sin().exp() + t.cos() * x
    }

    fn f_lifted<S: Lift<f64>>(x: S, t: S) -> S {
        (x * t).sin().exp() + t.cos() * x
    }

    #[test]
    fn plain_lift_matches_direct() {
        let (x, t) = (0.8, 0.6);
        assert_eq!(f_lifted::<f64>(x, t), f_plain(x, t));
    }

    #[test]
    fn dual_matches_central_differences() {
        let (x, t) = (0.8, 0.6);
        let h = 1e-6;
        let fd_t = (f_plain(x, t + h) - f_plain(x, t - h)) / (2.0 * h);
        let out = f_lifted(Dual::constant(x), Dual::new(t, 1.0));
        assert!((out.d - fd_t).abs() < 1e-8, "dual {} vs fd {}", out.d, fd_t);

        let fd_x = (f_plain(x + h, t) - f_plain(x - h, t)) / (2.0 * h);
        let out = f_lifted(Dual::new(x, 1.0), Dual::constant(t));
        assert!((out.d - fd_x).abs() < 1e-8, "dual {} vs fd {}", out.d, fd_x);
    }

    #[test]
    fn hdual_mixed_derivative_matches_differences() {
        let (x, t) = (0.8, 0.6);
        let out = f_lifted(HDual::new(x, 1.0, 0.0, 0.0), HDual::new(t, 0.0, 1.0, 0.0));

        let h = 1e-4;
        let fd12 = (f_plain(x + h, t + h) - f_plain(x + h, t - h) - f_plain(x - h, t + h)
            + f_plain(x - h, t - h))
            / (4.0 * h * h);
        assert!((out.v - f_plain(x, t)).abs() < 1e-14);
        assert!((out.d12 - fd12).abs() < 1e-6, "d12 {} vs fd {}", out.d12, fd12);

        // First-order slots agree with Dual.
        let d1 = f_lifted(Dual::new(x, 1.0), Dual::constant(t)).d;
        let d2 = f_lifted(Dual::constant(x), Dual::new(t, 1.0)).d;
        assert!((out.d1 - d1).abs() < 1e-14);
        assert!((out.d2 - d2).abs() < 1e-14);
    }

    #[test]
    fn hdual_symmetry_of_mixed_derivative() {
        // Swapping which slot carries x and t must not change d12.
        let (x, t) = (-1.3, 0.35);
        let a = f_lifted(HDual::new(x, 1.0, 0.0, 0.0), HDual::new(t, 0.0, 1.0, 0.0));
        let b = f_lifted(HDual::new(x, 0.0, 1.0, 0.0), HDual::new(t, 1.0, 0.0, 0.0));
        assert!((a.d12 - b.d12).abs() < 1e-13);
    }

    #[test]
    fn chain_second_derivative_used_only_by_hdual() {
        // recip-style chain: f = 1/v, df = -1/v^2, d2f = 2/v^3
        let v = 2.0f64;
        let x = HDual::new(v, 1.0, 1.0, 0.0);
        let r = x.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v));
        assert_eq!(r.v, 0.5);
        assert_eq!(r.d1, -0.25);
        assert_eq!(r.d2, -0.25);
        assert_eq!(r.d12, 0.25); // d2f * d1 * d2 = 2/8
    }
}
