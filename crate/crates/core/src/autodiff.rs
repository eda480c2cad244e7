//! Forward-mode automatic differentiation with nested dual numbers.
//!
//! Models write their equations once, generic over [`Scalar`]. Evaluating with
//! `f64` gives values; with `Dual<f64>` a directional first derivative; with
//! `Dual<Dual<f64>>` a mixed second derivative, and so on. The helpers at the
//! bottom of this module assemble full Jacobians, Hessians and third-derivative
//! tensors out of directional evaluations.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};

use crate::tensor::Tensor3;

/// Real-like number usable inside model equations.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + 'static
{
    fn cst(v: f64) -> Self;
    /// Innermost real part.
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn powi(self, n: i32) -> Self {
        match n {
            0 => Self::cst(1.0),
            n if n < 0 => Self::cst(1.0) / self.powi(-n),
            n => {
                let mut acc = self;
                for _ in 1..n {
                    acc *= self;
                }
                acc
            }
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// A dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: T) -> Self {
        Self {
            re,
            eps: T::zero(),
        }
    }

    pub fn variable(re: T) -> Self {
        Self {
            re,
            eps: T::cst(1.0),
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.re * rhs.re, self.re * rhs.eps + self.eps * rhs.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = T::cst(1.0) / rhs.re;
        let re = self.re * inv;
        Self::new(re, (self.eps - re * rhs.eps) * inv)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> AddAssign for Dual<T> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Scalar> SubAssign for Dual<T> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<T: Scalar> MulAssign for Dual<T> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<T: Scalar> Add<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Self::new(self.re + rhs, self.eps)
    }
}

impl<T: Scalar> Sub<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Self::new(self.re - rhs, self.eps)
    }
}

impl<T: Scalar> Mul<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.re * rhs, self.eps * rhs)
    }
}

impl<T: Scalar> Div<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        Self::new(self.re / rhs, self.eps / rhs)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re.value()
    }
    #[inline]
    fn sin(self) -> Self {
        Self::new(self.re.sin(), self.eps * self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Self::new(self.re.cos(), -(self.eps * self.re.sin()))
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.eps / (s * 2.0))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, self.eps * e)
    }
}

type D1 = Dual<f64>;
type D2 = Dual<Dual<f64>>;
type D3 = Dual<Dual<Dual<f64>>>;

/// A vector-valued function written once for every scalar type.
pub trait VectorFn {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

pub fn value<F: VectorFn>(f: &F, x: &[f64]) -> DVector<f64> {
    DVector::from_vec(f.eval(x))
}

/// Jacobian `J[i, a] = ∂f_i/∂x_a`, one directional sweep per input.
pub fn jacobian<F: VectorFn>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = f.input_dim();
    let m = f.output_dim();
    let mut jac = DMatrix::zeros(m, n);
    let mut xd: Vec<D1> = x.iter().map(|&v| D1::constant(v)).collect();
    for a in 0..n {
        xd[a].eps = 1.0;
        let out = f.eval(&xd);
        for (i, o) in out.iter().enumerate() {
            jac[(i, a)] = o.eps;
        }
        xd[a].eps = 0.0;
    }
    jac
}

/// Hessian tensor `H[i, a, b] = ∂²f_i/∂x_a∂x_b`.
pub fn hessian<F: VectorFn>(f: &F, x: &[f64]) -> Tensor3 {
    let n = f.input_dim();
    let m = f.output_dim();
    let mut h = Tensor3::zeros(m, n, n);
    let mut xd: Vec<D2> = x.iter().map(|&v| D2::cst(v)).collect();
    for a in 0..n {
        xd[a].re.eps = 1.0;
        for b in a..n {
            xd[b].eps.re = 1.0;
            let out = f.eval(&xd);
            for (i, o) in out.iter().enumerate() {
                let v = o.eps.eps;
                h[(i, a, b)] = v;
                h[(i, b, a)] = v;
            }
            xd[b].eps.re = 0.0;
        }
        xd[a].re.eps = 0.0;
    }
    h
}

/// Third derivatives of a scalar function, `T[a, b, c] = ∂³f/∂x_a∂x_b∂x_c`.
pub fn third_derivatives<F: VectorFn>(f: &F, x: &[f64]) -> Tensor3 {
    assert_eq!(f.output_dim(), 1, "third_derivatives expects a scalar function");
    let n = f.input_dim();
    let mut t = Tensor3::zeros(n, n, n);
    let mut xd: Vec<D3> = x.iter().map(|&v| D3::cst(v)).collect();
    for a in 0..n {
        xd[a].re.re.eps = 1.0;
        for b in a..n {
            xd[b].re.eps.re = 1.0;
            for c in b..n {
                xd[c].eps.re.re = 1.0;
                let v = f.eval(&xd)[0].eps.eps.eps;
                for (i, j, k) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                    t[(i, j, k)] = v;
                }
                xd[c].eps.re.re = 0.0;
            }
            xd[b].re.eps.re = 0.0;
        }
        xd[a].re.re.eps = 0.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Poly;
    impl VectorFn for Poly {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
            // x^3 y + sin(y)
            vec![x[0] * x[0] * x[0] * x[1] + x[1].sin()]
        }
    }

    #[test]
    fn derivatives_of_polynomial_and_trig() {
        let x = [1.5, 0.3];
        let j = jacobian(&Poly, &x);
        assert!((j[(0, 0)] - 3.0 * 2.25 * 0.3).abs() < 1e-14);
        assert!((j[(0, 1)] - (3.375 + 0.3f64.cos())).abs() < 1e-14);
        let h = hessian(&Poly, &x);
        assert!((h[(0, 0, 0)] - 6.0 * 1.5 * 0.3).abs() < 1e-13);
        assert!((h[(0, 0, 1)] - 3.0 * 2.25).abs() < 1e-13);
        assert!((h[(0, 1, 1)] + 0.3f64.sin()).abs() < 1e-14);
        let t = third_derivatives(&Poly, &x);
        assert!((t[(0, 0, 0)] - 6.0 * 0.3).abs() < 1e-13);
        assert!((t[(0, 0, 1)] - 9.0).abs() < 1e-13);
        assert!((t[(1, 0, 0)] - 9.0).abs() < 1e-13);
        assert!((t[(1, 1, 1)] + 0.3f64.cos()).abs() < 1e-14);
    }

    #[test]
    fn quotient_and_sqrt_rules() {
        let x = D1::variable(2.0);
        let y = (x * x + 1.0).sqrt() / x;
        // d/dx sqrt(x^2+1)/x = -1/(x^2 sqrt(x^2+1))
        let expected = -1.0 / (4.0 * 5f64.sqrt());
        assert!((y.eps - expected).abs() < 1e-15);
        let e = D1::variable(0.7).exp();
        assert!((e.eps - 0.7f64.exp()).abs() < 1e-15);
        assert!((D1::variable(2.0).powi(-2).eps + 0.25).abs() < 1e-15);
    }
}
