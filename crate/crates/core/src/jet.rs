//! Third-order truncated Taylor jets in `D` variables.
//!
//! A [`Jet3`] carries a value together with its gradient, Hessian and third
//! derivative tensor. Arithmetic propagates all four blocks with the
//! truncated Leibniz and chain rules, so composing jets gives derivatives
//! exact to rounding.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub struct Jet3 {
    dim: usize,
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
    third: Vec<f64>,
}

impl Jet3 {
    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            dim,
            value,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
            third: vec![0.0; dim * dim * dim],
        }
    }

    /// The coordinate function `q_i` evaluated at `x`.
    pub fn variable(dim: usize, i: usize, x: f64) -> Self {
        assert!(i < dim, "variable index {i} out of range for dimension {dim}");
        let mut j = Self::constant(dim, x);
        j.grad[i] = 1.0;
        j
    }

    /// Seeds one variable jet per coordinate of `q`.
    pub fn seed(q: &[f64]) -> Vec<Self> {
        let d = q.len();
        q.iter().enumerate().map(|(i, &x)| Self::variable(d, i, x)).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn d1(&self, i: usize) -> f64 {
        self.grad[i]
    }

    pub fn d2(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.dim + j]
    }

    pub fn d3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.third[(i * self.dim + j) * self.dim + k]
    }

    pub fn constant_like(&self, value: f64) -> Self {
        Self::constant(self.dim, value)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|x| x.is_finite())
            && self.hess.iter().all(|x| x.is_finite())
            && self.third.iter().all(|x| x.is_finite())
    }

    /// Applies a smooth scalar function given its value and first three
    /// derivatives at `self.value()`.
    pub fn compose(&self, f0: f64, f1: f64, f2: f64, f3: f64) -> Self {
        let d = self.dim;
        let u = &self.grad;
        let mut out = Self::constant(d, f0);
        for i in 0..d {
            out.grad[i] = f1 * u[i];
        }
        for i in 0..d {
            for j in 0..d {
                out.hess[i * d + j] = f1 * self.hess[i * d + j] + f2 * u[i] * u[j];
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mixed = self.hess[i * d + j] * u[k]
                        + self.hess[i * d + k] * u[j]
                        + self.hess[j * d + k] * u[i];
                    out.third[(i * d + j) * d + k] = f1 * self.third[(i * d + j) * d + k]
                        + f2 * mixed
                        + f3 * u[i] * u[j] * u[k];
                }
            }
        }
        out
    }

    pub fn recip(&self) -> Self {
        let v = self.value;
        let r = 1.0 / v;
        self.compose(r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
    }

    pub fn powi(&self, n: i32) -> Self {
        let u = self.value;
        let nf = n as f64;
        // k-th derivative of u^n; vanishes identically once k > n >= 0
        let deriv = |k: i32| -> f64 {
            if n >= 0 && k > n {
                return 0.0;
            }
            let mut c = 1.0;
            for j in 0..k {
                c *= nf - j as f64;
            }
            c * u.powi(n - k)
        };
        self.compose(deriv(0), deriv(1), deriv(2), deriv(3))
    }

    pub fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.compose(
            s,
            0.5 / s,
            -0.25 / (s * s * s),
            0.375 / (s * s * s * s * s),
        )
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.compose(e, e, e, e)
    }

    pub fn ln(&self) -> Self {
        let u = self.value;
        self.compose(u.ln(), 1.0 / u, -1.0 / (u * u), 2.0 / (u * u * u))
    }

    pub fn sin(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.compose(s, c, -s, -c)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.compose(c, -s, -c, s)
    }

    pub fn tan(&self) -> Self {
        let t = self.value.tan();
        let s = 1.0 + t * t;
        self.compose(t, s, 2.0 * t * s, 2.0 * s * s + 4.0 * t * t * s)
    }

    pub fn sinh(&self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.compose(s, c, s, c)
    }

    pub fn cosh(&self) -> Self {
        let (s, c) = (self.value.sinh(), self.value.cosh());
        self.compose(c, s, c, s)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            dim: self.dim,
            value: a * self.value,
            grad: self.grad.iter().map(|x| a * x).collect(),
            hess: self.hess.iter().map(|x| a * x).collect(),
            third: self.third.iter().map(|x| a * x).collect(),
        }
    }

    fn check_dim(&self, other: &Self) {
        assert_eq!(self.dim, other.dim, "jet dimension mismatch");
    }
}

impl Add<&Jet3> for &Jet3 {
    type Output = Jet3;
    fn add(self, rhs: &Jet3) -> Jet3 {
        self.check_dim(rhs);
        Jet3 {
            dim: self.dim,
            value: self.value + rhs.value,
            grad: zip(&self.grad, &rhs.grad, |a, b| a + b),
            hess: zip(&self.hess, &rhs.hess, |a, b| a + b),
            third: zip(&self.third, &rhs.third, |a, b| a + b),
        }
    }
}

impl Sub<&Jet3> for &Jet3 {
    type Output = Jet3;
    fn sub(self, rhs: &Jet3) -> Jet3 {
        self.check_dim(rhs);
        Jet3 {
            dim: self.dim,
            value: self.value - rhs.value,
            grad: zip(&self.grad, &rhs.grad, |a, b| a - b),
            hess: zip(&self.hess, &rhs.hess, |a, b| a - b),
            third: zip(&self.third, &rhs.third, |a, b| a - b),
        }
    }
}

impl Mul<&Jet3> for &Jet3 {
    type Output = Jet3;
    fn mul(self, rhs: &Jet3) -> Jet3 {
        self.check_dim(rhs);
        let d = self.dim;
        let (u, v) = (self, rhs);
        let mut out = Jet3::constant(d, u.value * v.value);
        for i in 0..d {
            out.grad[i] = u.value * v.grad[i] + u.grad[i] * v.value;
        }
        for i in 0..d {
            for j in 0..d {
                let ij = i * d + j;
                out.hess[ij] = u.value * v.hess[ij]
                    + u.grad[i] * v.grad[j]
                    + u.grad[j] * v.grad[i]
                    + u.hess[ij] * v.value;
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let ijk = (i * d + j) * d + k;
                    out.third[ijk] = u.value * v.third[ijk]
                        + u.grad[i] * v.hess[j * d + k]
                        + u.grad[j] * v.hess[i * d + k]
                        + u.grad[k] * v.hess[i * d + j]
                        + u.hess[i * d + j] * v.grad[k]
                        + u.hess[i * d + k] * v.grad[j]
                        + u.hess[j * d + k] * v.grad[i]
                        + u.third[ijk] * v.value;
                }
            }
        }
        out
    }
}

impl Div<&Jet3> for &Jet3 {
    type Output = Jet3;
    fn div(self, rhs: &Jet3) -> Jet3 {
        self * &rhs.recip()
    }
}

impl Neg for &Jet3 {
    type Output = Jet3;
    fn neg(self) -> Jet3 {
        self.scale(-1.0)
    }
}

impl Neg for Jet3 {
    type Output = Jet3;
    fn neg(self) -> Jet3 {
        self.scale(-1.0)
    }
}

impl AddAssign<&Jet3> for Jet3 {
    fn add_assign(&mut self, rhs: &Jet3) {
        self.check_dim(rhs);
        self.value += rhs.value;
        for (a, b) in self.grad.iter_mut().zip(&rhs.grad) {
            *a += b;
        }
        for (a, b) in self.hess.iter_mut().zip(&rhs.hess) {
            *a += b;
        }
        for (a, b) in self.third.iter_mut().zip(&rhs.third) {
            *a += b;
        }
    }
}

macro_rules! forward_binop {
    ($tr:ident, $m:ident) => {
        impl $tr<Jet3> for Jet3 {
            type Output = Jet3;
            fn $m(self, rhs: Jet3) -> Jet3 {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Jet3> for Jet3 {
            type Output = Jet3;
            fn $m(self, rhs: &Jet3) -> Jet3 {
                (&self).$m(rhs)
            }
        }
        impl $tr<Jet3> for &Jet3 {
            type Output = Jet3;
            fn $m(self, rhs: Jet3) -> Jet3 {
                self.$m(&rhs)
            }
        }
        impl $tr<f64> for &Jet3 {
            type Output = Jet3;
            fn $m(self, rhs: f64) -> Jet3 {
                self.$m(&self.constant_like(rhs))
            }
        }
        impl $tr<f64> for Jet3 {
            type Output = Jet3;
            fn $m(self, rhs: f64) -> Jet3 {
                (&self).$m(&self.constant_like(rhs))
            }
        }
    };
}

forward_binop!(Add, add);
forward_binop!(Sub, sub);
forward_binop!(Mul, mul);
forward_binop!(Div, div);

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_variables() {
        let q = Jet3::seed(&[2.0, 3.0]);
        let p = &(&q[0] * &q[0]) * &q[1];
        assert_eq!(p.value(), 12.0);
        assert_eq!(p.d1(0), 12.0);
        assert_eq!(p.d1(1), 4.0);
        assert_eq!(p.d2(0, 0), 6.0);
        assert_eq!(p.d2(0, 1), 4.0);
        assert_eq!(p.d3(0, 0, 1), 2.0);
        assert_eq!(p.d3(0, 1, 0), 2.0);
        assert_eq!(p.d3(1, 1, 1), 0.0);
    }

    #[test]
    fn recip_matches_series() {
        // 1/(1-x) = 1 + x + x^2 + x^3 + ...
        let x = Jet3::variable(1, 0, 0.0);
        let r = (x.constant_like(1.0) - &x).recip();
        assert_eq!(r.value(), 1.0);
        assert_eq!(r.d1(0), 1.0);
        assert_eq!(r.d2(0, 0), 2.0);
        assert_eq!(r.d3(0, 0, 0), 6.0);
    }

    #[test]
    fn powi_at_zero_is_finite() {
        let x = Jet3::variable(1, 0, 0.0);
        let p = x.powi(2);
        assert!(p.is_finite());
        assert_eq!(p.d2(0, 0), 2.0);
        assert_eq!(p.d3(0, 0, 0), 0.0);
    }

    #[test]
    fn trig_identity() {
        let q = Jet3::seed(&[0.3, -0.7]);
        let u = &q[0] * &q[1] + &q[0];
        let one = &(&u.sin() * &u.sin()) + &(&u.cos() * &u.cos());
        assert!((one.value() - 1.0).abs() < 1e-15);
        for i in 0..2 {
            assert!(one.d1(i).abs() < 1e-14);
            for j in 0..2 {
                assert!(one.d2(i, j).abs() < 1e-14);
                for k in 0..2 {
                    assert!(one.d3(i, j, k).abs() < 1e-13);
                }
            }
        }
    }
}
