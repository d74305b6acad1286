//! Periodic Green function of −d²/dτ² without the zero mode.
//!
//! Δ′(x) = x²/(2β) − |x|/2 + β/12 on [−β, β], extended periodically, and its
//! Matsubara truncation (2/β) Σ_{m=1}^{M} cos(ω_m x)/ω_m².

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagatorError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("mode cutoff must be at least 1")]
    InvalidCutoff,
    #[error("grid point x = {x} is closer than beta/(10M) = {min} to the coincidence point")]
    TooCloseToCoincidence { x: f64, min: f64 },
    #[error("product of two divergent counters")]
    NonlinearCounter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPropagator {
    pub beta: f64,
    pub m: usize,
}

/// constant + coeff_nprop·N_prop + coeff_nall·N_all with N_prop = 2M and
/// N_all = 2M + 1. Coefficients carry their own powers of β.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterPolynomial {
    pub constant: f64,
    pub coeff_nprop: f64,
    pub coeff_nall: f64,
}

impl CounterPolynomial {
    pub const ZERO: CounterPolynomial = CounterPolynomial { constant: 0.0, coeff_nprop: 0.0, coeff_nall: 0.0 };

    pub fn constant(c: f64) -> Self {
        Self { constant: c, ..Self::ZERO }
    }

    pub fn nprop(c: f64) -> Self {
        Self { coeff_nprop: c, ..Self::ZERO }
    }

    pub fn nall(c: f64) -> Self {
        Self { coeff_nall: c, ..Self::ZERO }
    }

    pub fn value_at(&self, m: usize) -> f64 {
        let np = 2.0 * m as f64;
        self.constant + self.coeff_nprop * np + self.coeff_nall * (np + 1.0)
    }

    /// Coefficient of the M-divergent part (both counters grow like 2M).
    pub fn divergent_coefficient(&self) -> f64 {
        self.coeff_nprop + self.coeff_nall
    }

    pub fn has_counters(&self) -> bool {
        self.coeff_nprop != 0.0 || self.coeff_nall != 0.0
    }

    /// M-independent value once the divergent parts cancel, using
    /// N_all − N_prop = 1; `None` if they do not cancel within `tol`.
    pub fn finite_part(&self, tol: f64) -> Option<f64> {
        let scale = self.coeff_nprop.abs().max(self.coeff_nall.abs()).max(f64::MIN_POSITIVE);
        if self.divergent_coefficient().abs() <= tol * scale || !self.has_counters() {
            Some(self.constant + self.coeff_nall)
        } else {
            None
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { constant: a * self.constant, coeff_nprop: a * self.coeff_nprop, coeff_nall: a * self.coeff_nall }
    }

    /// Product, defined only while at most one factor carries counters.
    pub fn try_mul(&self, other: &Self) -> Result<Self, PropagatorError> {
        if self.has_counters() && other.has_counters() {
            return Err(PropagatorError::NonlinearCounter);
        }
        Ok(Self {
            constant: self.constant * other.constant,
            coeff_nprop: self.constant * other.coeff_nprop + self.coeff_nprop * other.constant,
            coeff_nall: self.constant * other.coeff_nall + self.coeff_nall * other.constant,
        })
    }
}

impl Add for CounterPolynomial {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            constant: self.constant + o.constant,
            coeff_nprop: self.coeff_nprop + o.coeff_nprop,
            coeff_nall: self.coeff_nall + o.coeff_nall,
        }
    }
}

impl Sub for CounterPolynomial {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for CounterPolynomial {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul<f64> for CounterPolynomial {
    type Output = Self;
    fn mul(self, a: f64) -> Self {
        self.scale(a)
    }
}

impl std::iter::Sum for CounterPolynomial {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

/// Coincidence values consumed by the Wick engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualTimeTable {
    /// β/12, the M → ∞ value used inside counter coefficients.
    pub delta0: f64,
    /// Δ′_M(0) at the cutoff.
    pub delta0_modes: f64,
    /// Δ̇′(0), zero by the odd mode sum.
    pub delta_dot0: f64,
    /// ⟨ξ̇ξ̇⟩ at equal times = N_prop/β.
    pub dd_delta0: CounterPolynomial,
    /// δ(0) from the measure = N_all/β.
    pub delta_measure0: CounterPolynomial,
}

impl PeriodicPropagator {
    pub fn new(beta: f64, m: usize) -> Result<Self, PropagatorError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(PropagatorError::InvalidBeta(beta));
        }
        if m == 0 {
            return Err(PropagatorError::InvalidCutoff);
        }
        Ok(Self { beta, m })
    }

    pub fn omega(&self, m: usize) -> f64 {
        2.0 * PI * m as f64 / self.beta
    }

    /// x reduced to [0, β).
    pub fn reduce(&self, x: f64) -> f64 {
        let r = x.rem_euclid(self.beta);
        if r >= self.beta {
            0.0
        } else {
            r
        }
    }

    pub fn green_closed(&self, tau: f64, taup: f64) -> f64 {
        self.closed_derivative(0, tau - taup)
    }

    /// n-th derivative of Δ′ at separation x. The coincidence value of the
    /// first derivative is the principal value 0; the second derivative
    /// returns the regular part 1/β (its δ-function is handled by callers).
    pub fn closed_derivative(&self, n: u8, x: f64) -> f64 {
        let b = self.beta;
        let r = self.reduce(x);
        match n {
            0 => r * r / (2.0 * b) - r / 2.0 + b / 12.0,
            1 => {
                if r == 0.0 {
                    0.0
                } else {
                    r / b - 0.5
                }
            }
            2 => 1.0 / b,
            _ => 0.0,
        }
    }

    pub fn green_modes(&self, tau: f64, taup: f64) -> f64 {
        self.modes_derivative(0, tau - taup)
    }

    /// n-th derivative of the truncated mode sum at separation x.
    pub fn modes_derivative(&self, n: u8, x: f64) -> f64 {
        let u = x / self.beta;
        let mut acc = 0.0;
        // sum from the highest mode down keeps the small terms first; phases
        // are reduced in units of the period before scaling by 2π
        for m in (1..=self.m).rev() {
            let w = self.omega(m);
            let t = m as f64 * u;
            let phase = 2.0 * PI * (t - t.round());
            let c = match n % 4 {
                0 => phase.cos(),
                1 => -phase.sin(),
                2 => -phase.cos(),
                _ => phase.sin(),
            };
            acc += w.powi(n as i32 - 2) * c;
        }
        2.0 * acc / self.beta
    }

    /// ⟨∂^d ξ(τ) ∂^{d′} ξ(τ′)⟩ = (−1)^{d′} Δ′^{(d+d′)}(τ − τ′) on the truncated modes.
    pub fn pair_modes(&self, d: u8, dp: u8, x: f64) -> f64 {
        let s = if dp % 2 == 1 { -1.0 } else { 1.0 };
        s * self.modes_derivative(d + dp, x)
    }

    /// Δ′_M(0) = (β/2π²) Σ_{m≤M} 1/m².
    pub fn delta0_modes(&self) -> f64 {
        let s: f64 = (1..=self.m).rev().map(|m| 1.0 / (m as f64 * m as f64)).sum();
        self.beta * s / (2.0 * PI * PI)
    }

    pub fn equal_time_table(&self) -> EqualTimeTable {
        EqualTimeTable {
            delta0: self.beta / 12.0,
            delta0_modes: self.delta0_modes(),
            delta_dot0: 0.0,
            dd_delta0: CounterPolynomial::nprop(1.0 / self.beta),
            delta_measure0: CounterPolynomial::nall(1.0 / self.beta),
        }
    }

    /// Truncated completeness sum (1/β) Σ_{|m|≤M} e^{−iω_m x}, via the
    /// Dirichlet kernel.
    pub fn delta_modes(&self, x: f64) -> f64 {
        let b = self.beta;
        let u = x / b;
        let s = (PI * (u - u.round())).sin();
        let n = (2 * self.m + 1) as f64;
        if s.abs() < 1e-300 {
            return n / b;
        }
        // sin(nπu)/sin(πu) is even in the shift u → u − round(u) for odd n
        let t = n * (u - u.round());
        (PI * (t - 2.0 * (t / 2.0).round())).sin() / (b * s)
    }

    /// max over the grid of |−Δ″_M(x) − (δ_M(x) − 1/β)|.
    pub fn ode_residual(&self, grid: &[f64]) -> Result<f64, PropagatorError> {
        let min = self.beta / (10.0 * self.m as f64);
        let mut worst = 0.0f64;
        for &x in grid {
            let r = self.reduce(x);
            if r.min(self.beta - r) < min {
                return Err(PropagatorError::TooCloseToCoincidence { x, min });
            }
            let lhs = -self.modes_derivative(2, x);
            let rhs = self.delta_modes(x) - 1.0 / self.beta;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let p = PeriodicPropagator::new(2.0, 10).unwrap();
        assert!((p.green_closed(0.0, 0.0) - 2.0 / 12.0).abs() < 1e-15);
        assert!((p.green_closed(1.0, 0.0) + 2.0 / 24.0).abs() < 1e-15);
        assert!((p.green_closed(0.3, 0.1) - p.green_closed(0.1, 0.3)).abs() < 1e-15);
        assert!((p.green_closed(2.3, 0.0) - p.green_closed(0.3, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn single_mode() {
        let p = PeriodicPropagator::new(1.0, 1).unwrap();
        assert!((p.green_modes(0.0, 0.0) - 1.0 / (2.0 * PI * PI)).abs() < 1e-16);
        assert_eq!(p.green_modes(0.3, 0.7), p.green_modes(0.7, 0.3));
    }

    #[test]
    fn counters() {
        let p = PeriodicPropagator::new(0.5, 5).unwrap();
        let t = p.equal_time_table();
        assert_eq!(t.dd_delta0.value_at(5), 10.0 / 0.5);
        assert_eq!(t.delta_measure0.value_at(5), 11.0 / 0.5);
        let a = CounterPolynomial { constant: 1.0, coeff_nprop: -2.0, coeff_nall: 2.0 };
        assert_eq!(a.finite_part(0.0), Some(3.0));
        assert_eq!(CounterPolynomial::nprop(1.0).finite_part(1e-12), None);
        assert!(CounterPolynomial::nprop(1.0).try_mul(&CounterPolynomial::nall(1.0)).is_err());
    }

    #[test]
    fn coincidence_guard() {
        let p = PeriodicPropagator::new(1.0, 10).unwrap();
        assert!(p.ode_residual(&[0.001]).is_err());
        assert!(p.ode_residual(&[0.999]).is_err());
        assert!(p.ode_residual(&[0.25]).unwrap() < 1e-12);
    }
}
