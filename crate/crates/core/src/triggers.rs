//! Transmission policies as auxiliary dynamics, guard and jump update.
//!
//! The closed-loop state is laid out as `q = (x, e, η)` with the
//! transmission counter `κ` carried as the hybrid counter. Self-triggered
//! loops append the clocks `(τ₁, τ₂)`.

use std::sync::Arc;

use thiserror::Error;

use crate::functions::{jet_gamma_tilde, JetEngineLyapunov, LyapunovFunction, Polynomial, ScaledSquaredNorm};
use crate::hybrid::{HybridState, HybridSystem};
use crate::lie::{lie_values, GuardFunction, LieError};
use crate::ncs::{jet_engine_system, NcsSystem};
use crate::protocols::Protocol;
use crate::roots::smallest_positive_root;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriggerError {
    #[error("η = {eta} left the clock range [{lower}, {upper}]")]
    EtaOutOfRange { eta: f64, lower: f64, upper: f64 },
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("state has dimension {got}, loop expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Positions of `x`, `e` and `η` inside the flat closed-loop state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub nx: usize,
    pub ne: usize,
}

impl StateLayout {
    pub fn of(ncs: &NcsSystem) -> Self {
        Self { nx: ncs.state_dim(), ne: ncs.error_dim() }
    }
    pub fn eta(&self) -> usize {
        self.nx + self.ne
    }
    /// Length of `(x, e, η)`.
    pub fn dim(&self) -> usize {
        self.nx + self.ne + 1
    }
    pub fn x<'a>(&self, q: &'a [f64]) -> &'a [f64] {
        &q[..self.nx]
    }
    pub fn e<'a>(&self, q: &'a [f64]) -> &'a [f64] {
        &q[self.nx..self.nx + self.ne]
    }
}

/// Unpacked closed-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct NcsState {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub kappa: u64,
    pub eta: f64,
}

impl NcsState {
    pub fn new(x: Vec<f64>, e: Vec<f64>, kappa: u64, eta: f64) -> Self {
        Self { x, e, kappa, eta }
    }

    pub fn from_hybrid(layout: StateLayout, state: &HybridState) -> Self {
        let q = &state.values;
        Self {
            x: layout.x(q).to_vec(),
            e: layout.e(q).to_vec(),
            kappa: state.counter,
            eta: q[layout.eta()],
        }
    }

    pub fn to_hybrid(&self) -> HybridState {
        let mut values = Vec::with_capacity(self.x.len() + self.e.len() + 1);
        values.extend_from_slice(&self.x);
        values.extend_from_slice(&self.e);
        values.push(self.eta);
        HybridState::new(values, self.kappa)
    }
}

/// Auxiliary-variable dynamics, guard and reset of one transmission policy.
pub trait TransmissionPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn initial_eta(&self) -> f64;
    fn eta_rate(&self, x: &[f64], e: &[f64], eta: f64) -> f64;
    fn guard(&self, protocol: &Protocol, kappa: u64, x: &[f64], e: &[f64], eta: f64) -> f64;
    /// `η⁺` from the pre-jump state.
    fn jump_eta(&self, protocol: &Protocol, kappa: u64, x: &[f64], e: &[f64], eta: f64) -> f64;
}

#[derive(Clone)]
pub struct ThresholdPolicy {
    pub gamma_tilde: Polynomial,
    /// `δ` in `η̇ = −δ(η)`.
    pub decay: Polynomial,
    pub eta0: f64,
    pub lyapunov: Arc<dyn LyapunovFunction>,
}

impl std::fmt::Debug for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThresholdPolicy")
            .field("gamma_tilde", &self.gamma_tilde)
            .field("decay", &self.decay)
            .field("eta0", &self.eta0)
            .finish()
    }
}

impl ThresholdPolicy {
    pub fn new(
        gamma_tilde: Polynomial,
        decay: Polynomial,
        eta0: f64,
        lyapunov: Arc<dyn LyapunovFunction>,
    ) -> Result<Self, TriggerError> {
        if !gamma_tilde.is_class_k_infinity() {
            return Err(TriggerError::InvalidParameter("γ̃ must be class-K∞".into()));
        }
        if !decay.is_class_k_infinity() {
            return Err(TriggerError::InvalidParameter("δ must be class-K∞".into()));
        }
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(TriggerError::InvalidParameter(format!("η₀ must be non-negative, got {eta0}")));
        }
        Ok(Self { gamma_tilde, decay, eta0, lyapunov })
    }

    /// Jet-engine gains: `γ̃(s) = 7.34e5 s² + 1.52e8 s⁴`, `δ(η) = 0.01η`,
    /// `η₀ = 5000`.
    pub fn jet() -> Self {
        Self::new(jet_gamma_tilde(), Polynomial::linear(0.01), 5000.0, Arc::new(JetEngineLyapunov))
            .expect("jet gains are valid")
    }
}

/// `γ̃(W(κ, e)) − max{V(x), η}`.
pub fn threshold_guard(q: &NcsState, policy: &ThresholdPolicy, protocol: &Protocol) -> f64 {
    policy.guard(protocol, q.kappa, &q.x, &q.e, q.eta)
}

/// `x⁺ = x`, `e⁺ = h_e(κ, e)`, `κ⁺ = κ + 1`, `η⁺ = γ̃(W(κ, e))`.
pub fn threshold_jump(q: &NcsState, policy: &ThresholdPolicy, protocol: &Protocol) -> NcsState {
    NcsState {
        x: q.x.clone(),
        e: protocol.jump_unchecked(q.kappa, &q.e),
        kappa: q.kappa + 1,
        eta: policy.jump_eta(protocol, q.kappa, &q.x, &q.e, q.eta),
    }
}

impl TransmissionPolicy for ThresholdPolicy {
    fn name(&self) -> &str {
        "threshold"
    }
    fn initial_eta(&self) -> f64 {
        self.eta0
    }
    fn eta_rate(&self, _x: &[f64], _e: &[f64], eta: f64) -> f64 {
        -self.decay.value(eta)
    }
    fn guard(&self, protocol: &Protocol, kappa: u64, x: &[f64], e: &[f64], eta: f64) -> f64 {
        self.gamma_tilde.value(protocol.w(kappa, e)) - self.lyapunov.value(x).max(eta)
    }
    fn jump_eta(&self, protocol: &Protocol, kappa: u64, _x: &[f64], e: &[f64], _eta: f64) -> f64 {
        self.gamma_tilde.value(protocol.w(kappa, e))
    }
}

/// Threshold rule without the auxiliary variable: transmit when
/// `γ̃(W) ≥ V`. Kept as a negative control; from `x = 0` it cannot leave
/// the jump set.
#[derive(Clone)]
pub struct NaiveThresholdPolicy {
    pub gamma_tilde: Polynomial,
    pub lyapunov: Arc<dyn LyapunovFunction>,
}

impl TransmissionPolicy for NaiveThresholdPolicy {
    fn name(&self) -> &str {
        "naive_threshold"
    }
    fn initial_eta(&self) -> f64 {
        0.0
    }
    fn eta_rate(&self, _: &[f64], _: &[f64], _: f64) -> f64 {
        0.0
    }
    fn guard(&self, protocol: &Protocol, kappa: u64, x: &[f64], e: &[f64], _eta: f64) -> f64 {
        self.gamma_tilde.value(protocol.w(kappa, e)) - self.lyapunov.value(x)
    }
    fn jump_eta(&self, _: &Protocol, _: u64, _: &[f64], _: &[f64], eta: f64) -> f64 {
        eta
    }
}

/// Gains `L(x, e)`, `G(x, e)` of the clock dynamics.
pub trait ClockGains: Send + Sync {
    fn l(&self, x: &[f64], e: &[f64]) -> f64;
    fn g(&self, x: &[f64], e: &[f64]) -> f64;
    /// `(L, G)` when both are constant.
    fn constant(&self) -> Option<(f64, f64)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantClockGains {
    pub l: f64,
    pub g: f64,
}

impl ClockGains for ConstantClockGains {
    fn l(&self, _: &[f64], _: &[f64]) -> f64 {
        self.l
    }
    fn g(&self, _: &[f64], _: &[f64]) -> f64 {
        self.g
    }
    fn constant(&self) -> Option<(f64, f64)> {
        Some((self.l, self.g))
    }
}

/// `η̇ = −2ηL − η² − G` on `[lower, upper]`, transmit at `lower`, reset to
/// `upper`. With a protocol contraction `ρ > 0` the range is `[aρ², a]`;
/// for `ρ = 0` an explicit `[b, c]` is used.
#[derive(Clone)]
pub struct ClockPolicy {
    pub gains: Arc<dyn ClockGains>,
    pub lower: f64,
    pub upper: f64,
}

impl std::fmt::Debug for ClockPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClockPolicy")
            .field("gains", &self.gains.constant())
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish()
    }
}

impl ClockPolicy {
    /// Range `[aρ², a]`; requires `0 < ρ < 1` and `a > ρ`.
    pub fn new(gains: Arc<dyn ClockGains>, a: f64, rho: f64) -> Result<Self, TriggerError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(TriggerError::InvalidParameter(format!(
                "ρ must lie in (0, 1) for the [aρ², a] range, got {rho}; use with_range for ρ = 0"
            )));
        }
        if !(a > rho && a.is_finite()) {
            return Err(TriggerError::InvalidParameter(format!("a must exceed ρ = {rho}, got {a}")));
        }
        Ok(Self { gains, lower: a * rho * rho, upper: a })
    }

    /// Range `[b, c]`, for protocols with `ρ = 0`.
    pub fn with_range(gains: Arc<dyn ClockGains>, b: f64, c: f64) -> Result<Self, TriggerError> {
        if !(b > 0.0 && c > b && c.is_finite()) {
            return Err(TriggerError::InvalidParameter(format!("need 0 < b < c, got b = {b}, c = {c}")));
        }
        Ok(Self { gains, lower: b, upper: c })
    }

    /// Scalar fixture: `L = √5`, `G = 5.6`, `a = 1`, `ρ = 1/√2`.
    pub fn scalar_fixture() -> Self {
        Self::new(
            Arc::new(ConstantClockGains { l: 5f64.sqrt(), g: 5.6 }),
            1.0,
            std::f64::consts::FRAC_1_SQRT_2,
        )
        .expect("fixture parameters are valid")
    }

    /// Guard `lower − η`, rejecting `η` outside the range by more than `tol`.
    pub fn checked_guard(&self, eta: f64, tol: f64) -> Result<f64, TriggerError> {
        if eta < self.lower - tol || eta > self.upper + tol {
            return Err(TriggerError::EtaOutOfRange { eta, lower: self.lower, upper: self.upper });
        }
        Ok(self.lower - eta)
    }

    /// Time for `η` to fall from `upper` to `lower` when `L` and `G` are
    /// constant, from the antiderivative of `1 / ((η + L)² + G − L²)`.
    pub fn constant_gain_interval(&self) -> Option<f64> {
        let (l, g) = self.gains.constant()?;
        let k = g - l * l;
        let anti = |eta: f64| -> f64 {
            let u = eta + l;
            if k > 0.0 {
                let r = k.sqrt();
                (u / r).atan() / r
            } else if k == 0.0 {
                -1.0 / u
            } else {
                let r = (-k).sqrt();
                ((u - r) / (u + r)).ln() / (2.0 * r)
            }
        };
        Some(anti(self.upper) - anti(self.lower))
    }
}

/// Clock guard `lower − η`, with the range check at `tol`.
pub fn clock_guard(q: &NcsState, policy: &ClockPolicy, tol: f64) -> Result<f64, TriggerError> {
    policy.checked_guard(q.eta, tol)
}

/// `η⁺ = upper` regardless of state; `e⁺ = h_e(κ, e)`, `κ⁺ = κ + 1`.
pub fn clock_jump(q: &NcsState, policy: &ClockPolicy, protocol: &Protocol) -> NcsState {
    NcsState {
        x: q.x.clone(),
        e: protocol.jump_unchecked(q.kappa, &q.e),
        kappa: q.kappa + 1,
        eta: policy.upper,
    }
}

impl TransmissionPolicy for ClockPolicy {
    fn name(&self) -> &str {
        "clock"
    }
    fn initial_eta(&self) -> f64 {
        self.upper
    }
    fn eta_rate(&self, x: &[f64], e: &[f64], eta: f64) -> f64 {
        -2.0 * eta * self.gains.l(x, e) - eta * eta - self.gains.g(x, e)
    }
    fn guard(&self, _: &Protocol, _: u64, _: &[f64], _: &[f64], eta: f64) -> f64 {
        self.lower - eta
    }
    fn jump_eta(&self, _: &Protocol, _: u64, _: &[f64], _: &[f64], _: f64) -> f64 {
        self.upper
    }
}

/// Time-triggered baseline; `η` runs as a timer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicPolicy {
    pub period: f64,
}

impl PeriodicPolicy {
    pub fn new(period: f64) -> Result<Self, TriggerError> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(TriggerError::InvalidParameter(format!("period must be positive, got {period}")));
        }
        Ok(Self { period })
    }
}

impl TransmissionPolicy for PeriodicPolicy {
    fn name(&self) -> &str {
        "periodic"
    }
    fn initial_eta(&self) -> f64 {
        0.0
    }
    fn eta_rate(&self, _: &[f64], _: &[f64], _: f64) -> f64 {
        1.0
    }
    fn guard(&self, _: &Protocol, _: u64, _: &[f64], _: &[f64], eta: f64) -> f64 {
        eta - self.period
    }
    fn jump_eta(&self, _: &Protocol, _: u64, _: &[f64], _: &[f64], _: f64) -> f64 {
        0.0
    }
}

/// NCS, protocol and policy assembled into a hybrid system over `(x, e, η)`.
#[derive(Clone)]
pub struct ClosedLoop {
    pub ncs: NcsSystem,
    pub protocol: Protocol,
    pub policy: Arc<dyn TransmissionPolicy>,
    layout: StateLayout,
}

impl std::fmt::Debug for ClosedLoop {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClosedLoop")
            .field("ncs", &self.ncs)
            .field("protocol", &self.protocol)
            .field("policy", &self.policy.name())
            .finish()
    }
}

impl ClosedLoop {
    pub fn new(ncs: NcsSystem, protocol: Protocol, policy: Arc<dyn TransmissionPolicy>) -> Result<Self, TriggerError> {
        if protocol.partition.dim() != ncs.error_dim() {
            return Err(TriggerError::DimensionMismatch { expected: ncs.error_dim(), got: protocol.partition.dim() });
        }
        let layout = StateLayout::of(&ncs);
        Ok(Self { ncs, protocol, policy, layout })
    }

    /// Jet-engine loop under TOD with the published threshold policy.
    pub fn jet_threshold() -> Self {
        let ncs = jet_engine_system();
        let protocol = Protocol::tod(ncs.partition.clone());
        Self::new(ncs, protocol, Arc::new(ThresholdPolicy::jet())).expect("consistent")
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    /// `q(0, 0) = (x₀, e₀, η₀)` with `κ = 0`.
    pub fn initial_state(&self, x0: &[f64], e0: &[f64]) -> Result<HybridState, TriggerError> {
        if x0.len() != self.layout.nx {
            return Err(TriggerError::DimensionMismatch { expected: self.layout.nx, got: x0.len() });
        }
        if e0.len() != self.layout.ne {
            return Err(TriggerError::DimensionMismatch { expected: self.layout.ne, got: e0.len() });
        }
        Ok(NcsState::new(x0.to_vec(), e0.to_vec(), 0, self.policy.initial_eta()).to_hybrid())
    }

    fn base_flow(&self, q: &[f64], dq: &mut [f64]) {
        let l = self.layout;
        let (dx, rest) = dq.split_at_mut(l.nx);
        let (de, deta) = rest.split_at_mut(l.ne);
        let x = l.x(q);
        let e = l.e(q);
        self.ncs.flow_into(x, e, dx, &mut de[..]);
        deta[0] = self.policy.eta_rate(x, e, q[l.eta()]);
    }

    fn base_jump(&self, kappa: u64, q: &[f64], out: &mut Vec<f64>) {
        let l = self.layout;
        let x = l.x(q);
        let e = l.e(q);
        let eta = q[l.eta()];
        out.clear();
        out.extend_from_slice(x);
        out.extend(self.protocol.jump_unchecked(kappa, e));
        out.push(self.policy.jump_eta(&self.protocol, kappa, x, e, eta));
    }
}

impl HybridSystem for ClosedLoop {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn flow(&self, _counter: u64, q: &[f64], dq: &mut [f64]) {
        self.base_flow(q, dq);
    }
    fn guard(&self, counter: u64, q: &[f64]) -> f64 {
        let l = self.layout;
        self.policy.guard(&self.protocol, counter, l.x(q), l.e(q), q[l.eta()])
    }
    fn jump(&self, state: &HybridState) -> Result<HybridState, String> {
        let mut values = Vec::with_capacity(state.values.len());
        self.base_jump(state.counter, &state.values, &mut values);
        Ok(HybridState::new(values, state.counter + 1))
    }
}

/// Which term the threshold-policy trigger function subtracts from `γ̃(W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdTerm {
    /// `Γ₁ = γ̃(W) − η`.
    Eta,
    /// `Γ₂ = γ̃(W) − V(x)`.
    Lyapunov,
}

/// `Γ₁` or `Γ₂` of the threshold policy, with a closed-form first Lie
/// derivative when the protocol certificate has a closed-form rate.
#[derive(Clone)]
pub struct ThresholdGamma {
    pub term: ThresholdTerm,
    pub policy: ThresholdPolicy,
    pub protocol: Protocol,
    pub layout: StateLayout,
}

impl GuardFunction for ThresholdGamma {
    fn value(&self, kappa: u64, q: &[f64]) -> f64 {
        let l = self.layout;
        let g = self.policy.gamma_tilde.value(self.protocol.w(kappa, l.e(q)));
        match self.term {
            ThresholdTerm::Eta => g - q[l.eta()],
            ThresholdTerm::Lyapunov => g - self.policy.lyapunov.value(l.x(q)),
        }
    }

    fn first_lie(&self, kappa: u64, q: &[f64], dq: &[f64]) -> Option<f64> {
        let l = self.layout;
        let e = l.e(q);
        let w_rate = self.protocol.w_rate(kappa, e, l.e(dq))?;
        let w = self.protocol.w(kappa, e);
        let g_rate = self.policy.gamma_tilde.derivative(w) * w_rate;
        Some(match self.term {
            ThresholdTerm::Eta => g_rate - dq[l.eta()],
            ThresholdTerm::Lyapunov => g_rate - self.policy.lyapunov.derivative_along(l.x(q), l.x(dq)),
        })
    }
}

/// `Γ = lower − η` of the clock policy.
#[derive(Debug, Clone, Copy)]
pub struct ClockGamma {
    pub lower: f64,
    pub layout: StateLayout,
}

impl GuardFunction for ClockGamma {
    fn value(&self, _: u64, q: &[f64]) -> f64 {
        self.lower - q[self.layout.eta()]
    }
    fn first_lie(&self, _: u64, _: &[f64], dq: &[f64]) -> Option<f64> {
        Some(-dq[self.layout.eta()])
    }
}

/// One trigger function with its polynomial weights `ς`.
#[derive(Clone)]
pub struct SelfTrigger {
    pub function: Arc<dyn GuardFunction>,
    pub coefficients: Vec<f64>,
}

#[derive(Clone)]
pub struct SelfTriggeredPolicy {
    pub triggers: Vec<SelfTrigger>,
    pub t_star: f64,
    pub epsilon: f64,
}

impl SelfTriggeredPolicy {
    pub fn new(triggers: Vec<SelfTrigger>, t_star: f64, epsilon: f64) -> Result<Self, TriggerError> {
        if triggers.is_empty() {
            return Err(TriggerError::InvalidParameter("at least one trigger function".into()));
        }
        if triggers.iter().any(|t| t.coefficients.len() < 2) {
            return Err(TriggerError::InvalidParameter("each trigger needs at least two coefficients".into()));
        }
        if !(t_star > 0.0 && epsilon > 0.0) {
            return Err(TriggerError::InvalidParameter("t* and ε must be positive".into()));
        }
        Ok(Self { triggers, t_star, epsilon })
    }

    /// Published jet-engine weights for `Γ₁ = γ̃(W) − η` (`n = 4`) and
    /// `Γ₂ = γ̃(W) − V` (`n = 3`), `t* = 1e-3`, `ε = 1e-4`.
    pub fn jet(policy: &ThresholdPolicy, protocol: &Protocol, layout: StateLayout) -> Self {
        let gamma = |term| -> Arc<dyn GuardFunction> {
            Arc::new(ThresholdGamma { term, policy: policy.clone(), protocol: protocol.clone(), layout })
        };
        Self::new(
            vec![
                SelfTrigger { function: gamma(ThresholdTerm::Eta), coefficients: vec![-8.06e3, -226.07, 481.76, -258.47] },
                SelfTrigger { function: gamma(ThresholdTerm::Lyapunov), coefficients: vec![-1.46e3, -1.21e3, 4.94e3] },
            ],
            1e-3,
            1e-4,
        )
        .expect("published weights are valid")
    }

    /// First-order emulation of a clock policy: `ς = (1, t*)`.
    pub fn clock(policy: &ClockPolicy, layout: StateLayout, t_star: f64, epsilon: f64) -> Result<Self, TriggerError> {
        Self::new(
            vec![SelfTrigger {
                function: Arc::new(ClockGamma { lower: policy.lower, layout }),
                coefficients: vec![1.0, t_star],
            }],
            t_star,
            epsilon,
        )
    }
}

/// Root of one weighted Lie polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTime {
    pub tau: f64,
    /// Smallest strictly positive root, if any.
    pub lambda: Option<f64>,
    /// Every `ς_i g_i` vanished; `tau` fell back to `ε`.
    pub degenerate: bool,
}

/// `τ₂ = max{λ* t*, ε}` with `λ*` the smallest positive real root of
/// `Σ ς_i g_i λ^i`; `ε` when there is none.
pub fn solve_next_time(g: &[f64], sigma: &[f64], t_star: f64, epsilon: f64) -> Result<NextTime, TriggerError> {
    if g.len() != sigma.len() || g.len() < 2 {
        return Err(TriggerError::InvalidParameter(format!(
            "need equal lengths ≥ 2, got {} Lie values and {} weights",
            g.len(),
            sigma.len()
        )));
    }
    if !(t_star > 0.0 && epsilon > 0.0) {
        return Err(TriggerError::InvalidParameter("t* and ε must be positive".into()));
    }
    let coeffs: Vec<f64> = g.iter().zip(sigma).map(|(a, b)| a * b).collect();
    if coeffs.iter().all(|c| *c == 0.0) {
        return Ok(NextTime { tau: epsilon, lambda: None, degenerate: true });
    }
    let lambda = smallest_positive_root(&coeffs);
    let tau = lambda.map_or(epsilon, |l| (l * t_star).max(epsilon));
    Ok(NextTime { tau, lambda, degenerate: false })
}

/// Per-trigger detail of one self-triggered schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub tau: f64,
    pub lie: Vec<Vec<f64>>,
    pub roots: Vec<NextTime>,
}

/// Event-triggered loop emulated by self-triggering, over
/// `q̃ = (x, e, η, τ₁, τ₂)`.
#[derive(Clone)]
pub struct SelfTriggeredLoop {
    pub base: ClosedLoop,
    pub policy: SelfTriggeredPolicy,
}

pub fn self_triggered_wrap(base: ClosedLoop, policy: SelfTriggeredPolicy) -> SelfTriggeredLoop {
    SelfTriggeredLoop { base, policy }
}

impl SelfTriggeredLoop {
    /// Jet-engine loop, TOD, published threshold gains and weights.
    pub fn jet() -> Self {
        let base = ClosedLoop::jet_threshold();
        let threshold = ThresholdPolicy::jet();
        let policy = SelfTriggeredPolicy::jet(&threshold, &base.protocol, base.layout());
        self_triggered_wrap(base, policy)
    }

    /// Next inter-transmission time from the base state `(x, e, η)`.
    pub fn schedule(&self, kappa: u64, q: &[f64]) -> Result<Schedule, TriggerError> {
        let flow = |p: &[f64], dp: &mut [f64]| self.base.base_flow(p, dp);
        let mut tau = self.policy.epsilon;
        let mut lie = Vec::with_capacity(self.policy.triggers.len());
        let mut roots = Vec::with_capacity(self.policy.triggers.len());
        for trig in &self.policy.triggers {
            let g = lie_values(trig.function.as_ref(), &flow, kappa, q, trig.coefficients.len())?;
            let next = solve_next_time(&g, &trig.coefficients, self.policy.t_star, self.policy.epsilon)?;
            tau = tau.max(next.tau);
            lie.push(g);
            roots.push(next);
        }
        Ok(Schedule { tau, lie, roots })
    }

    /// `(x₀, e₀, η₀, 0, τ₂)` with `τ₂` scheduled at the initial state.
    pub fn initial_state(&self, x0: &[f64], e0: &[f64]) -> Result<HybridState, TriggerError> {
        let mut s = self.base.initial_state(x0, e0)?;
        let tau = self.schedule(0, &s.values)?.tau;
        s.values.push(0.0);
        s.values.push(tau);
        Ok(s)
    }

    pub fn base_dim(&self) -> usize {
        self.base.dim()
    }
}

impl HybridSystem for SelfTriggeredLoop {
    fn dim(&self) -> usize {
        self.base.dim() + 2
    }
    fn flow(&self, _counter: u64, q: &[f64], dq: &mut [f64]) {
        let n = self.base.dim();
        self.base.base_flow(&q[..n], &mut dq[..n]);
        dq[n] = 1.0;
        dq[n + 1] = 0.0;
    }
    fn guard(&self, _counter: u64, q: &[f64]) -> f64 {
        let n = self.base.dim();
        q[n] - q[n + 1]
    }
    fn jump(&self, state: &HybridState) -> Result<HybridState, String> {
        let n = self.base.dim();
        let mut values = Vec::with_capacity(n + 2);
        self.base.base_jump(state.counter, &state.values[..n], &mut values);
        let kappa = state.counter + 1;
        let tau = self.schedule(kappa, &values).map_err(|e| e.to_string())?.tau;
        values.push(0.0);
        values.push(tau);
        Ok(HybridState::new(values, kappa))
    }
}

/// `V(x) = 1.1x²` of the scalar clock fixture.
pub fn scalar_fixture_lyapunov() -> ScaledSquaredNorm {
    ScaledSquaredNorm { c: 1.1 }
}
