//! Real roots of small real polynomials.
//!
//! Coefficients are in ascending powers. Degrees one to three use closed
//! forms; higher degrees use the eigenvalues of the companion matrix. Every
//! real root is polished with a few Newton steps on the original polynomial.

use nalgebra::DMatrix;

pub fn eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn eval_with_derivative(coeffs: &[f64], x: f64) -> (f64, f64) {
    let mut p = 0.0;
    let mut dp = 0.0;
    for c in coeffs.iter().rev() {
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp)
}

fn polish(coeffs: &[f64], mut x: f64) -> f64 {
    let mut best = eval(coeffs, x).abs();
    for _ in 0..8 {
        let (p, dp) = eval_with_derivative(coeffs, x);
        if p == 0.0 || dp == 0.0 || !dp.is_finite() {
            break;
        }
        let next = x - p / dp;
        let val = eval(coeffs, next).abs();
        if !(val < best) {
            break;
        }
        best = val;
        x = next;
    }
    x
}

/// Real roots of `Σ c_i x^i`, sorted ascending. Exactly-zero leading
/// coefficients are dropped; the zero polynomial has no reported roots.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.last() == Some(&0.0) {
        c.pop();
    }
    let mut roots = Vec::new();
    // Factor out x = 0.
    let zeros = c.iter().take_while(|v| **v == 0.0).count();
    if zeros > 0 && zeros < c.len() {
        roots.push(0.0);
        c.drain(..zeros);
    }
    let found = match c.len() {
        0 | 1 => Vec::new(),
        2 => vec![-c[0] / c[1]],
        3 => quadratic(c[2], c[1], c[0]),
        4 => cubic(c[3], c[2], c[1], c[0]),
        _ => companion(&c),
    };
    roots.extend(found.into_iter().map(|r| polish(&c, r)));
    roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
    roots
}

/// Smallest strictly positive real root, if any.
pub fn smallest_positive_root(coeffs: &[f64]) -> Option<f64> {
    real_roots(coeffs).into_iter().find(|r| *r > 0.0)
}

fn quadratic(a: f64, b: f64, c: f64) -> Vec<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    if disc == 0.0 {
        return vec![-b / (2.0 * a)];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    vec![q / a, c / q]
}

fn cubic(a3: f64, a2: f64, a1: f64, a0: f64) -> Vec<f64> {
    let a = a2 / a3;
    let b = a1 / a3;
    let c = a0 / a3;
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if p == 0.0 && q == 0.0 {
        return vec![-shift];
    }
    if disc > 0.0 {
        let s = disc.sqrt();
        let t = (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt();
        vec![t - shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = ((3.0 * q) / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() - shift)
            .collect()
    }
}

fn companion(c: &[f64]) -> Vec<f64> {
    let n = c.len() - 1;
    let lead = c[n];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        m[(i, n - 1)] = -c[i] / lead;
    }
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-8 * z.re.abs().max(1.0))
        .map(|z| z.re)
        .collect()
}
