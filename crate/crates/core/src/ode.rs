//! Dormand–Prince 5(4) embedded Runge–Kutta pair with a fourth-order
//! continuous extension.
//!
//! The stepper works on plain `f64` slices. It does not own any stopping
//! logic: callers decide what to do with accepted steps, which keeps event
//! localization in [`crate::hybrid`].

// Only autonomous right-hand sides are integrated, so the node abscissae
// c_i never enter.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Difference between the fifth- and fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense-output weights.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Result of one trial step: the proposed state, the scaled error norm and
/// the stage derivatives needed for dense output.
pub struct TrialStep {
    pub y_new: Vec<f64>,
    pub error: f64,
    k: [Vec<f64>; 7],
}

impl TrialStep {
    /// Derivative at the end of the step (first-same-as-last stage).
    pub fn end_derivative(&self) -> &[f64] {
        &self.k[6]
    }

    /// Build the continuous extension over `[t0, t0 + h]`.
    pub fn dense(&self, t0: f64, h: f64, y0: &[f64]) -> DenseStep {
        let n = y0.len();
        let k = &self.k;
        let mut r = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let ydiff = self.y_new[i] - y0[i];
            let bspl = h * k[0][i] - ydiff;
            r[0][i] = y0[i];
            r[1][i] = ydiff;
            r[2][i] = bspl;
            r[3][i] = ydiff - h * k[6][i] - bspl;
            r[4][i] = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                    + D7 * k[6][i]);
        }
        DenseStep { t0, h, r }
    }
}

/// Fourth-order interpolant over one accepted step.
pub struct DenseStep {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.r[0][i]
                + theta
                    * (self.r[1][i]
                        + theta1
                            * (self.r[2][i]
                                + theta * (self.r[3][i] + theta1 * self.r[4][i])));
        }
    }
}

/// Weighted RMS norm used for both step-size selection and error control.
pub fn scaled_norm(v: &[f64], y_a: &[f64], y_b: &[f64], rel_tol: f64, abs_tol: f64) -> f64 {
    let n = v.len().max(1) as f64;
    let sum: f64 = v
        .iter()
        .zip(y_a.iter().zip(y_b))
        .map(|(vi, (a, b))| {
            let sk = abs_tol + rel_tol * a.abs().max(b.abs());
            (vi / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// One Dormand–Prince trial step of size `h` from `y0` with `k1 = f(y0)`.
pub fn trial_step<F>(f: &F, y0: &[f64], k1: &[f64], h: f64, rel_tol: f64, abs_tol: f64) -> TrialStep
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = y0.len();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = k1.to_vec();
    for slot in k.iter_mut().skip(1) {
        *slot = vec![0.0; n];
    }
    let mut tmp = vec![0.0; n];

    let stage = |tmp: &mut [f64], k: &[Vec<f64>; 7], coeffs: &[(usize, f64)]| {
        for i in 0..n {
            let mut acc = 0.0;
            for &(s, a) in coeffs {
                acc += a * k[s][i];
            }
            tmp[i] = y0[i] + h * acc;
        }
    };

    stage(&mut tmp, &k, &[(0, A21)]);
    f(&tmp, &mut k[1]);
    stage(&mut tmp, &k, &[(0, A31), (1, A32)]);
    f(&tmp, &mut k[2]);
    stage(&mut tmp, &k, &[(0, A41), (1, A42), (2, A43)]);
    f(&tmp, &mut k[3]);
    stage(&mut tmp, &k, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
    f(&tmp, &mut k[4]);
    stage(&mut tmp, &k, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
    f(&tmp, &mut k[5]);
    let mut y_new = vec![0.0; n];
    stage(&mut y_new, &k, &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)]);
    f(&y_new, &mut k[6]);

    let err_vec: Vec<f64> = (0..n)
        .map(|i| {
            h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                + E7 * k[6][i])
        })
        .collect();
    let error = scaled_norm(&err_vec, y0, &y_new, rel_tol, abs_tol);
    TrialStep { y_new, error, k }
}

/// Initial step-size heuristic (Hairer, Nørsett & Wanner, algorithm II.4.14).
pub fn initial_step<F>(f: &F, y0: &[f64], f0: &[f64], rel_tol: f64, abs_tol: f64, max_step: f64) -> f64
where
    F: Fn(&[f64], &mut [f64]),
{
    let d0 = scaled_norm(y0, y0, y0, rel_tol, abs_tol);
    let d1 = scaled_norm(f0, y0, y0, rel_tol, abs_tol);
    // A component sitting at zero may still move by one tolerance unit.
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0.max(1.0) / d1 };
    let h0 = h0.min(max_step);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + h0 * d).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(&y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_norm(&diff, y0, y0, rel_tol, abs_tol) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(max_step)
}
