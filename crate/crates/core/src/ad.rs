//! Nested forward-mode dual numbers.
//!
//! A `Dual<S>` carries a value and one infinitesimal component, both of type
//! `S`. Nesting `Dual<Dual<..>>` k times gives one independent infinitesimal
//! per level, and the coefficient of `ε₁ε₂…ε_k` is the mixed directional
//! derivative `D_{d₁}…D_{d_k} f`. Repeated directions are allowed, so
//! `D2 = Dual<Dual<f64>>` seeded twice along the same axis yields an exact
//! second partial.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the expression evaluator.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Nesting depth (number of infinitesimals).
    const DEPTH: usize;

    fn cst(c: f64) -> Self;
    /// Real part (all infinitesimals dropped).
    fn re(&self) -> f64;
    /// Coefficient of the product of all infinitesimals.
    fn top(&self) -> f64;
    /// Variable with value `val` and coefficient `coeffs[j]` on level `j`.
    /// `coeffs.len()` must equal `DEPTH`.
    fn seeded(val: f64, coeffs: &[f64]) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, k: i32) -> Self;
    fn all_finite(&self) -> bool;

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    const DEPTH: usize = 0;

    #[inline]
    fn cst(c: f64) -> Self {
        c
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn top(&self) -> f64 {
        *self
    }
    #[inline]
    fn seeded(val: f64, coeffs: &[f64]) -> Self {
        debug_assert!(coeffs.is_empty());
        val
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Self { re, eps }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    const DEPTH: usize = S::DEPTH + 1;

    #[inline]
    fn cst(c: f64) -> Self {
        Self::new(S::cst(c), S::cst(0.0))
    }
    #[inline]
    fn re(&self) -> f64 {
        self.re.re()
    }
    #[inline]
    fn top(&self) -> f64 {
        self.eps.top()
    }
    #[inline]
    fn seeded(val: f64, coeffs: &[f64]) -> Self {
        let (last, rest) = coeffs.split_last().expect("seed depth mismatch");
        Self::new(S::seeded(val, rest), S::cst(*last))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, e * self.eps)
    }
    #[inline]
    fn ln(self) -> Self {
        Self::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.eps / s.scale(2.0))
    }
    #[inline]
    fn powi(self, k: i32) -> Self {
        match k {
            0 => Self::cst(1.0),
            1 => self,
            _ => {
                let lower = self.re.powi(k - 1);
                Self::new(lower * self.re, (lower * self.eps).scale(k as f64))
            }
        }
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.eps.all_finite()
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Self::new(self.re.scale(c), self.eps.scale(c))
    }
}

pub type D1 = Dual<f64>;
pub type D2 = Dual<D1>;
pub type D3 = Dual<D2>;
pub type D4 = Dual<D3>;

/// Highest derivative order supported by the nesting aliases.
pub const MAX_ORDER: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn f<S: Scalar>(x: S, y: S) -> S {
        // x³y² + exp(x)/y
        x.powi(3) * y.powi(2) + x.exp() / y
    }

    #[test]
    fn first_derivative() {
        let x = D1::seeded(1.5, &[1.0]);
        let y = D1::seeded(2.0, &[0.0]);
        let out = f(x, y);
        let expected = 3.0 * 1.5f64.powi(2) * 4.0 + 1.5f64.exp() / 2.0;
        assert_relative_eq!(out.top(), expected, max_relative = 1e-14);
        assert_relative_eq!(out.re(), f(1.5, 2.0), max_relative = 1e-14);
    }

    #[test]
    fn repeated_axis_gives_pure_second_partial() {
        let x = D2::seeded(1.5, &[1.0, 1.0]);
        let y = D2::seeded(2.0, &[0.0, 0.0]);
        let expected = 6.0 * 1.5 * 4.0 + 1.5f64.exp() / 2.0;
        assert_relative_eq!(f(x, y).top(), expected, max_relative = 1e-14);
    }

    #[test]
    fn fourth_order_mixed() {
        // ∂x∂x∂y∂y of x³y² = 6x·2 = 12x, of exp(x)/y = exp(x)·2/y³
        let x = D4::seeded(0.7, &[1.0, 0.0, 1.0, 0.0]);
        let y = D4::seeded(1.3, &[0.0, 1.0, 0.0, 1.0]);
        let expected = 12.0 * 0.7 + 0.7f64.exp() * 2.0 / 1.3f64.powi(3);
        assert_relative_eq!(f(x, y).top(), expected, max_relative = 1e-12);
    }

    #[test]
    fn sqrt_and_ln_chain() {
        // d/dx ln(sqrt(x)) = 1/(2x)
        let x = D1::seeded(3.0, &[1.0]);
        assert_relative_eq!(x.sqrt().ln().top(), 1.0 / 6.0, max_relative = 1e-14);
        // d²/dx² of x^-2 = 6 x^-4
        let x = D2::seeded(3.0, &[1.0, 1.0]);
        let inv = D2::cst(1.0) / x.powi(2);
        assert_relative_eq!(inv.top(), 6.0 / 81.0, max_relative = 1e-13);
    }
}
