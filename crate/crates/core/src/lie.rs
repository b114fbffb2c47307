//! Lie derivatives of scalar functions along a flow.
//!
//! Order one uses a closed form when the function supplies one. Higher
//! orders differentiate the order-below value numerically along the flow
//! direction: central differences at steps `s`, `s/2`, `s/4`, combined into
//! two Richardson estimates. The state-space displacement of the widest
//! stencil is `h = 1e-5 · (1 + |q|)`, so `s = h / |f(q)|` in time units,
//! capped at `s = h` where the flow is slow (near an equilibrium the
//! uncapped stencil would reach far beyond the state's own scale).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("Lie derivative of order {order} looks non-smooth (Richardson estimates {coarse} and {fine})")]
    NonSmoothGuard { order: usize, coarse: f64, fine: f64 },
    #[error("at least one Lie value is required")]
    NoOrders,
}

/// Scalar function `Γ(κ, q)` whose Lie derivatives drive self-triggering.
pub trait GuardFunction: Send + Sync {
    fn value(&self, kappa: u64, q: &[f64]) -> f64;

    /// `⟨∇Γ(q), dq⟩` in closed form, when available.
    fn first_lie(&self, _kappa: u64, _q: &[f64], _dq: &[f64]) -> Option<f64> {
        None
    }
}

/// Relative disagreement between the two Richardson estimates above which
/// the function is declared non-smooth.
pub const NONSMOOTH_TOL: f64 = 1e-3;

/// Below this magnitude products of state components reach subnormals and
/// lose relative precision, so error estimates get an absolute floor.
const UNDERFLOW_SCALE: f64 = f64::MIN_POSITIVE / f64::EPSILON;

struct Ctx<'a> {
    gamma: &'a dyn GuardFunction,
    flow: &'a dyn Fn(&[f64], &mut [f64]),
    kappa: u64,
}

/// Value plus an absolute error estimate.
#[derive(Clone, Copy)]
struct Est {
    v: f64,
    err: f64,
}

impl Ctx<'_> {
    fn eval(&self, order: usize, q: &[f64]) -> Result<Est, LieError> {
        match order {
            0 => {
                let v = self.gamma.value(self.kappa, q);
                Ok(Est { v, err: 64.0 * f64::EPSILON * (v.abs() + UNDERFLOW_SCALE) })
            }
            _ => with_scratch(q.len(), |dq| {
                (self.flow)(q, dq);
                if order == 1 {
                    if let Some(v) = self.gamma.first_lie(self.kappa, q, dq) {
                        return Ok(Est { v, err: 1e3 * f64::EPSILON * (v.abs() + UNDERFLOW_SCALE) });
                    }
                }
                self.differentiate(order, q, dq)
            }),
        }
    }

    /// Derivative of the order-below value along `dq`.
    fn differentiate(&self, order: usize, q: &[f64], dq: &[f64]) -> Result<Est, LieError> {
        let speed = dq.iter().map(|v| v * v).sum::<f64>().sqrt();
        if speed == 0.0 {
            return Ok(Est { v: 0.0, err: 0.0 });
        }
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = 1e-5 * (1.0 + qn) / speed.max(1.0);
        let mut worst_err = 0.0f64;
        let (d1, d2, d4) = with_scratch(q.len(), |p| {
            let mut central = |step: f64| -> Result<f64, LieError> {
                for (pi, (qi, vi)) in p.iter_mut().zip(q.iter().zip(dq)) {
                    *pi = qi + step * vi;
                }
                let up = self.eval(order - 1, p)?;
                for (pi, (qi, vi)) in p.iter_mut().zip(q.iter().zip(dq)) {
                    *pi = qi - step * vi;
                }
                let down = self.eval(order - 1, p)?;
                worst_err = worst_err.max(up.err).max(down.err);
                Ok((up.v - down.v) / (2.0 * step))
            };
            Ok::<_, LieError>((central(s)?, central(s / 2.0)?, central(s / 4.0)?))
        })?;
        let coarse = (4.0 * d2 - d1) / 3.0;
        let fine = (4.0 * d4 - d2) / 3.0;
        // Rounding noise of the narrowest difference quotient.
        let noise = 8.0 * worst_err / s;
        let gap = (coarse - fine).abs();
        if gap > NONSMOOTH_TOL * coarse.abs().max(fine.abs()) + noise {
            return Err(LieError::NonSmoothGuard { order, coarse, fine });
        }
        Ok(Est { v: fine, err: gap + noise })
    }
}

/// Run `f` on a zeroed buffer of length `n`, on the stack when small.
fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut stack = [0.0f64; 16];
    if n <= stack.len() {
        f(&mut stack[..n])
    } else {
        f(&mut vec![0.0; n])
    }
}

/// `[Γ(q), L¹Γ(q), …, Lⁿ⁻¹Γ(q)]` along `flow`, with `κ` frozen.
pub fn lie_values(
    gamma: &dyn GuardFunction,
    flow: &dyn Fn(&[f64], &mut [f64]),
    kappa: u64,
    q: &[f64],
    n: usize,
) -> Result<Vec<f64>, LieError> {
    if n == 0 {
        return Err(LieError::NoOrders);
    }
    let ctx = Ctx { gamma, flow, kappa };
    (0..n).map(|k| ctx.eval(k, q).map(|e| e.v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Component(usize);
    impl GuardFunction for Component {
        fn value(&self, _: u64, q: &[f64]) -> f64 {
            q[self.0]
        }
    }

    struct Constant(f64);
    impl GuardFunction for Constant {
        fn value(&self, _: u64, _: &[f64]) -> f64 {
            self.0
        }
    }

    #[test]
    fn linear_decay_of_eta() {
        let flow = |q: &[f64], dq: &mut [f64]| dq[0] = -0.01 * q[0];
        let v = lie_values(&Component(0), &flow, 0, &[5000.0], 2).unwrap();
        assert_eq!(v[0], 5000.0);
        assert!((v[1] + 50.0).abs() < 1e-7, "{v:?}");
    }

    #[test]
    fn constant_has_zero_derivatives() {
        let flow = |q: &[f64], dq: &mut [f64]| {
            dq[0] = q[1];
            dq[1] = -q[0];
        };
        let v = lie_values(&Constant(3.5), &flow, 0, &[0.3, 0.7], 4).unwrap();
        assert_eq!(v, vec![3.5, 0.0, 0.0, 0.0]);
    }

    struct ComponentWithRate(usize);
    impl GuardFunction for ComponentWithRate {
        fn value(&self, _: u64, q: &[f64]) -> f64 {
            q[self.0]
        }
        fn first_lie(&self, _: u64, _: &[f64], dq: &[f64]) -> Option<f64> {
            Some(dq[self.0])
        }
    }

    #[test]
    fn exponential_higher_orders() {
        // Γ = q, q̇ = −2q: LᵏΓ = (−2)ᵏ q. At |q| ~ 1 the stencil is ~1e-5
        // wide, so each nested level loses digits to rounding; two levels
        // on top of the closed-form first order stay within 1e-4.
        let flow = |q: &[f64], dq: &mut [f64]| dq[0] = -2.0 * q[0];
        let v = lie_values(&ComponentWithRate(0), &flow, 0, &[1.5], 4).unwrap();
        for (k, val) in v.iter().enumerate() {
            let exact = (-2.0f64).powi(k as i32) * 1.5;
            assert!((val - exact).abs() <= 1e-4 * exact.abs(), "order {k}: {val} vs {exact}");
        }
    }

    #[test]
    fn numeric_first_order() {
        let flow = |q: &[f64], dq: &mut [f64]| dq[0] = -2.0 * q[0];
        let v = lie_values(&Component(0), &flow, 0, &[1.5], 3).unwrap();
        assert!((v[1] + 3.0).abs() < 1e-8, "{v:?}");
        assert!((v[2] - 6.0).abs() < 1e-4, "{v:?}");
    }

    #[test]
    fn equilibrium_gives_zero_rates() {
        let flow = |_: &[f64], dq: &mut [f64]| dq.fill(0.0);
        let v = lie_values(&Component(0), &flow, 0, &[2.0], 3).unwrap();
        assert_eq!(v, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn kink_is_reported() {
        struct Abs;
        impl GuardFunction for Abs {
            fn value(&self, _: u64, q: &[f64]) -> f64 {
                (q[0] - 1.0).abs()
            }
        }
        let flow = |_: &[f64], dq: &mut [f64]| dq[0] = 1.0;
        let err = lie_values(&Abs, &flow, 0, &[1.0 + 1e-5], 2).unwrap_err();
        assert!(matches!(err, LieError::NonSmoothGuard { order: 1, .. }));
    }
}
