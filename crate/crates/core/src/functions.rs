//! Comparison functions and Lyapunov functions used by the policies.

use serde::{Deserialize, Serialize};

/// Polynomial `Σ c_k s^k` in ascending powers, used for class-K gains
/// such as `γ̃`, `δ`, `α` and `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn linear(slope: f64) -> Self {
        Self::new(vec![0.0, slope])
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn value(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    pub fn derivative(&self, s: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * s + k as f64 * c)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * factor).collect())
    }

    /// Class-K∞ check for polynomials: zero at the origin, non-negative
    /// coefficients, at least one positive.
    pub fn is_class_k_infinity(&self) -> bool {
        self.coeffs.first().is_none_or(|c| *c == 0.0)
            && self.coeffs.iter().all(|c| *c >= 0.0)
            && self.coeffs.iter().any(|c| *c > 0.0)
    }

    /// `lim_{s→0} p(ρs) / p(s)`: `ρ^k` for the lowest non-zero power `k`.
    pub fn small_signal_ratio(&self, rho: f64) -> Option<f64> {
        self.coeffs.iter().position(|c| *c != 0.0).map(|k| rho.powi(k as i32))
    }
}

/// Smooth Lyapunov function of the plant/controller state.
pub trait LyapunovFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    /// Largest known `c` with `V(x) ≥ c·|x|²`.
    fn quadratic_lower_bound(&self) -> Option<f64> {
        None
    }

    fn derivative_along(&self, x: &[f64], dx: &[f64]) -> f64 {
        let mut stack = [0.0f64; 16];
        let mut heap;
        let g: &mut [f64] = if x.len() <= stack.len() {
            &mut stack[..x.len()]
        } else {
            heap = vec![0.0; x.len()];
            &mut heap
        };
        self.gradient(x, g);
        g.iter().zip(dx).map(|(a, b)| a * b).sum()
    }
}

/// `V(x) = ½x₁² + ½(x₂ − 3x₁)²` for the jet-engine loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct JetEngineLyapunov;

impl LyapunovFunction for JetEngineLyapunov {
    fn value(&self, x: &[f64]) -> f64 {
        let z = x[1] - 3.0 * x[0];
        0.5 * x[0] * x[0] + 0.5 * z * z
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let z = x[1] - 3.0 * x[0];
        grad[0] = x[0] - 3.0 * z;
        grad[1] = z;
    }
    /// Smallest eigenvalue of `[[5, −1.5], [−1.5, 0.5]]`.
    fn quadratic_lower_bound(&self) -> Option<f64> {
        Some((5.5 - 29.25f64.sqrt()) / 2.0)
    }
}

/// `V(x) = c·|x|²`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledSquaredNorm {
    pub c: f64,
}

impl LyapunovFunction for ScaledSquaredNorm {
    fn value(&self, x: &[f64]) -> f64 {
        self.c * x.iter().map(|v| v * v).sum::<f64>()
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = 2.0 * self.c * v;
        }
    }
    fn quadratic_lower_bound(&self) -> Option<f64> {
        Some(self.c)
    }
}

/// Published jet-engine gains: `γ̃(s) = 7.34e5 s² + 1.52e8 s⁴`.
pub fn jet_gamma_tilde() -> Polynomial {
    Polynomial::new(vec![0.0, 0.0, 7.34e5, 0.0, 1.52e8])
}

/// `γ(s) = 4.37e4 s² + 9.10e6 s⁴`.
pub fn jet_iss_gain() -> Polynomial {
    Polynomial::new(vec![0.0, 0.0, 4.37e4, 0.0, 9.10e6])
}

/// `α(s) = 0.066 s`.
pub fn jet_iss_decay() -> Polynomial {
    Polynomial::linear(0.066)
}
