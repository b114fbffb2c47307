//! Runtime checks of the Lyapunov decrease conditions along simulated
//! solutions, the ISS assumption, and dwell-time statistics.
//!
//! Checks run either on a stored [`HybridTrajectory`] or online through
//! [`Monitor`], which implements [`TrajectoryObserver`].

use std::sync::Arc;

use serde::Serialize;

use crate::functions::{LyapunovFunction, Polynomial};
use crate::hybrid::{HybridError, HybridSystem, HybridTime, HybridTrajectory, JumpRecord, Segment, TrajectoryObserver};
use crate::ncs::NcsSystem;
use crate::protocols::Protocol;
use crate::sampling::{norm, seeded_rng, uniform_in_ball};
use crate::triggers::StateLayout;

/// How `R(q)` is composed.
#[derive(Clone)]
pub enum RForm {
    /// `max{V(x), γ̃(W(κ, e)), η}`.
    Threshold { gamma_tilde: Polynomial },
    /// `V(x) + η·W²(κ, e)`, with the clock range `[aρ², a]` kept for reports.
    Clock { a: f64, rho: f64 },
}

#[derive(Clone)]
pub struct LyapunovSpec {
    pub lyapunov: Arc<dyn LyapunovFunction>,
    pub protocol: Protocol,
    pub layout: StateLayout,
    pub form: RForm,
}

impl LyapunovSpec {
    pub fn threshold(
        lyapunov: Arc<dyn LyapunovFunction>,
        gamma_tilde: Polynomial,
        protocol: Protocol,
        layout: StateLayout,
    ) -> Self {
        Self { lyapunov, protocol, layout, form: RForm::Threshold { gamma_tilde } }
    }

    pub fn clock(lyapunov: Arc<dyn LyapunovFunction>, protocol: Protocol, layout: StateLayout, a: f64, rho: f64) -> Self {
        Self { lyapunov, protocol, layout, form: RForm::Clock { a, rho } }
    }

    pub fn r(&self, kappa: u64, q: &[f64]) -> f64 {
        let l = self.layout;
        let v = self.lyapunov.value(l.x(q));
        let w = self.protocol.w(kappa, l.e(q));
        let eta = q[l.eta()];
        match &self.form {
            RForm::Threshold { gamma_tilde } => v.max(gamma_tilde.value(w)).max(eta),
            RForm::Clock { .. } => v + eta * w * w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
    /// Below this `R` a flow segment need not decrease strictly.
    pub strict_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rel: 1e-6, abs: 1e-10, strict_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowViolation {
    pub at: HybridTime,
    /// Time of the later sample of the offending pair.
    pub t: f64,
    pub increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpViolation {
    pub index: u64,
    pub t: f64,
    pub increase: f64,
}

/// Guard value above the allowed tolerance, during flow or right after a
/// jump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardViolation {
    pub t: f64,
    pub j: u64,
    pub guard: f64,
    pub allowed: f64,
}

/// Violation count with the first few offenders kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationLog<T> {
    pub count: u64,
    pub examples: Vec<T>,
}

impl<T> Default for ViolationLog<T> {
    fn default() -> Self {
        Self { count: 0, examples: Vec::new() }
    }
}

impl<T> ViolationLog<T> {
    const KEEP: usize = 64;

    fn push(&mut self, v: T) {
        self.count += 1;
        if self.examples.len() < Self::KEEP {
            self.examples.push(v);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn flow_violations(spec: &LyapunovSpec, tol: &Tolerances, seg: &Segment, out: &mut ViolationLog<FlowViolation>) {
    if seg.samples.len() < 2 {
        return;
    }
    let r: Vec<f64> = seg.samples.iter().map(|s| spec.r(seg.counter, &s.values)).collect();
    let scale = r.iter().copied().fold(0.0, f64::max);
    let allowed = tol.rel * scale + tol.abs;
    for (k, pair) in r.windows(2).enumerate() {
        let inc = pair[1] - pair[0];
        if inc > allowed {
            out.push(FlowViolation { at: seg.start, t: seg.samples[k + 1].t, increase: inc });
        }
    }
    let (first, last) = (r[0], r[r.len() - 1]);
    if seg.duration() > 0.0 && first > tol.strict_floor && last >= first {
        out.push(FlowViolation { at: seg.start, t: seg.end().t, increase: last - first });
    }
}

fn jump_violation(spec: &LyapunovSpec, tol: &Tolerances, jump: &JumpRecord) -> Option<JumpViolation> {
    let before = spec.r(jump.pre.counter, &jump.pre.values);
    let after = spec.r(jump.post.counter, &jump.post.values);
    (after > before * (1.0 + tol.rel) + tol.abs).then(|| JumpViolation {
        index: jump.at.j,
        t: jump.at.t,
        increase: after - before,
    })
}

/// `R(q⁺) ≤ R(q)·(1 + rel) + abs` at every jump.
pub fn check_jump_nonincrease(traj: &HybridTrajectory, spec: &LyapunovSpec, tol: &Tolerances) -> Vec<JumpViolation> {
    traj.jumps.iter().filter_map(|j| jump_violation(spec, tol, j)).collect()
}

/// Sampled non-increase of `R` on every flow segment, plus strict decrease
/// over each segment while `R` exceeds the floor.
pub fn check_flow_decrease(traj: &HybridTrajectory, spec: &LyapunovSpec, tol: &Tolerances) -> ViolationLog<FlowViolation> {
    let mut log = ViolationLog::default();
    for seg in &traj.segments {
        flow_violations(spec, tol, seg, &mut log);
    }
    log
}

/// Number of intervals per decade `[10^k, 10^(k+1))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwellReport {
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Intervals of exactly zero length (jumps without flow in between).
    pub zero: u64,
    pub histogram: Vec<DwellBucket>,
}

/// Streaming accumulator for inter-jump intervals.
#[derive(Debug, Clone, Default)]
pub struct DwellStats {
    count: u64,
    sum: f64,
    min: f64,
    max: f64,
    zero: u64,
    decades: std::collections::BTreeMap<i32, u64>,
}

impl DwellStats {
    pub fn push(&mut self, d: f64) {
        if self.count == 0 {
            self.min = d;
            self.max = d;
        } else {
            self.min = self.min.min(d);
            self.max = self.max.max(d);
        }
        self.count += 1;
        self.sum += d;
        if d <= 0.0 {
            self.zero += 1;
        } else {
            *self.decades.entry(d.log10().floor() as i32).or_default() += 1;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn report(&self) -> Result<DwellReport, HybridError> {
        if self.count == 0 {
            return Err(HybridError::EmptyTrajectory);
        }
        Ok(DwellReport {
            count: self.count,
            min: self.min,
            max: self.max,
            mean: self.sum / self.count as f64,
            zero: self.zero,
            histogram: self
                .decades
                .iter()
                .map(|(k, c)| DwellBucket { lower: 10f64.powi(*k), upper: 10f64.powi(k + 1), count: *c })
                .collect(),
        })
    }
}

/// Min, mean, max and decade histogram of the inter-jump intervals, the
/// first measured from `t = 0`.
pub fn dwell_time_report(traj: &HybridTrajectory) -> Result<DwellReport, HybridError> {
    let mut stats = DwellStats::default();
    for d in crate::hybrid::inter_jump_intervals(traj)? {
        stats.push(d);
    }
    stats.report()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    pub flow_violations: ViolationLog<FlowViolation>,
    pub jump_violations: ViolationLog<JumpViolation>,
    /// Base guard positive during flow (self-triggered safety).
    pub flow_guard_violations: ViolationLog<GuardViolation>,
    /// Post-jump state outside the flow set.
    pub membership_violations: ViolationLog<GuardViolation>,
    /// Intervals with the jump at or before the timing cutoff.
    pub dwell: Option<DwellReport>,
    pub final_x_norm: f64,
    pub converged: bool,
    /// Time at which `R` certified `|x| < CONVERGENCE_RADIUS` for all later
    /// times and the run was stopped.
    pub certified_at: Option<f64>,
}

impl MonitorReport {
    pub fn violation_count(&self) -> u64 {
        self.flow_violations.count
            + self.jump_violations.count
            + self.flow_guard_violations.count
            + self.membership_violations.count
    }

    pub fn passed(&self) -> bool {
        self.violation_count() == 0
    }
}

/// `|x(t_end)|` below which a run counts as converged.
pub const CONVERGENCE_RADIUS: f64 = 0.01;

/// Online monitor. Optional guard checks use a system whose guard reads
/// the `(x, e, η)` prefix of the state, so they also apply to
/// self-triggered states.
pub struct Monitor<'a> {
    layout: StateLayout,
    spec: Option<&'a LyapunovSpec>,
    tol: Tolerances,
    flow_guard: Option<(&'a dyn HybridSystem, f64)>,
    membership: Option<(&'a dyn HybridSystem, f64)>,
    cutoff: f64,
    last_jump_t: f64,
    dwell: DwellStats,
    flow: ViolationLog<FlowViolation>,
    jumps: ViolationLog<JumpViolation>,
    flow_guard_log: ViolationLog<GuardViolation>,
    membership_log: ViolationLog<GuardViolation>,
    last_values: Vec<f64>,
    certified_stop: Option<f64>,
    certified_at: Option<f64>,
}

impl<'a> Monitor<'a> {
    /// Monitor checking `R` from `spec`.
    pub fn new(spec: &'a LyapunovSpec, tol: Tolerances) -> Self {
        let mut m = Self::without_spec(spec.layout, tol);
        m.spec = Some(spec);
        m
    }

    /// Monitor without a Lyapunov function: guard checks, dwell statistics
    /// and convergence only.
    pub fn without_spec(layout: StateLayout, tol: Tolerances) -> Self {
        Self {
            layout,
            spec: None,
            tol,
            flow_guard: None,
            membership: None,
            cutoff: f64::INFINITY,
            last_jump_t: 0.0,
            dwell: DwellStats::default(),
            flow: ViolationLog::default(),
            jumps: ViolationLog::default(),
            flow_guard_log: ViolationLog::default(),
            membership_log: ViolationLog::default(),
            last_values: Vec::new(),
            certified_stop: None,
            certified_at: None,
        }
    }

    /// Stop the run at the first jump after `min_time` where
    /// `√(R(q⁺)/c) < CONVERGENCE_RADIUS`, `c` being the quadratic lower
    /// bound of `V`. Since `V ≤ R` and `R` does not increase along
    /// solutions, `|x|` stays below the radius from then on. Ignored when
    /// `V` has no known bound.
    pub fn with_certified_stop(mut self, min_time: f64) -> Self {
        self.certified_stop = Some(min_time);
        self
    }

    /// Flag flow samples where `guard > rel·R + abs`.
    pub fn with_flow_guard(mut self, system: &'a dyn HybridSystem, rel: f64) -> Self {
        self.flow_guard = Some((system, rel));
        self
    }

    /// Flag jumps whose post-state has `guard > abs`.
    pub fn with_membership(mut self, system: &'a dyn HybridSystem, abs: f64) -> Self {
        self.membership = Some((system, abs));
        self
    }

    /// Only jumps at `t <= cutoff` enter the dwell statistics.
    pub fn with_interval_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn finish(self) -> MonitorReport {
        let x = self.layout.x(&self.last_values);
        let final_x_norm = norm(x);
        let converged = final_x_norm < CONVERGENCE_RADIUS || self.certified_at.is_some();
        MonitorReport {
            certified_at: self.certified_at,
            flow_violations: self.flow,
            jump_violations: self.jumps,
            flow_guard_violations: self.flow_guard_log,
            membership_violations: self.membership_log,
            dwell: self.dwell.report().ok(),
            final_x_norm,
            converged,
        }
    }
}

impl TrajectoryObserver for Monitor<'_> {
    fn segment(&mut self, seg: Segment) {
        if let Some(spec) = self.spec {
            flow_violations(spec, &self.tol, &seg, &mut self.flow);
        }
        if let Some((sys, rel)) = self.flow_guard {
            for s in &seg.samples {
                let g = sys.guard(seg.counter, &s.values);
                let scale = self.spec.map_or(0.0, |spec| spec.r(seg.counter, &s.values));
                let allowed = rel * scale + self.tol.abs;
                if g > allowed {
                    self.flow_guard_log.push(GuardViolation { t: s.t, j: seg.start.j, guard: g, allowed });
                }
            }
        }
        self.last_values = seg.end().values.clone();
    }

    fn jump(&mut self, jump: JumpRecord) {
        if let Some(v) = self.spec.and_then(|spec| jump_violation(spec, &self.tol, &jump)) {
            self.jumps.push(v);
        }
        if let Some((sys, abs)) = self.membership {
            let g = sys.guard(jump.post.counter, &jump.post.values);
            if g > abs {
                self.membership_log.push(GuardViolation { t: jump.at.t, j: jump.at.j + 1, guard: g, allowed: abs });
            }
        }
        if jump.at.t <= self.cutoff {
            self.dwell.push(jump.at.t - self.last_jump_t);
        }
        self.last_jump_t = jump.at.t;
        let Some(spec) = self.spec else { return };
        if let (Some(min_time), Some(c)) = (self.certified_stop, spec.lyapunov.quadratic_lower_bound()) {
            if self.certified_at.is_none() && jump.at.t >= min_time && self.jumps.is_empty() && self.flow.is_empty() {
                let r = spec.r(jump.post.counter, &jump.post.values);
                if (r / c).sqrt() < CONVERGENCE_RADIUS {
                    self.certified_at = Some(jump.at.t);
                }
            }
        }
    }

    fn should_stop(&self) -> bool {
        self.certified_at.is_some()
    }
}

/// Run every check over a stored trajectory.
pub fn monitor_trajectory(traj: &HybridTrajectory, spec: &LyapunovSpec, tol: Tolerances) -> MonitorReport {
    let mut m = Monitor::new(spec, tol);
    let mut jumps = traj.jumps.iter();
    for seg in &traj.segments {
        m.segment(seg.clone());
        if let Some(j) = jumps.next() {
            m.jump(j.clone());
        }
    }
    m.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssViolation {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssReport {
    pub samples: usize,
    pub worst_slack: f64,
    pub violations: Vec<IssViolation>,
}

impl IssReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `−α(V(x)) + γ(|e|) − ⟨∇V(x), f_x(x, e)⟩`; non-negative where the ISS
/// inequality holds.
pub fn iss_slack(
    ncs: &NcsSystem,
    v: &dyn LyapunovFunction,
    alpha: &Polynomial,
    gamma: &Polynomial,
    x: &[f64],
    e: &[f64],
) -> f64 {
    let mut dx = vec![0.0; x.len()];
    let mut de = vec![0.0; e.len()];
    ncs.flow_into(x, e, &mut dx, &mut de);
    -alpha.value(v.value(x)) + gamma.value(norm(e)) - v.derivative_along(x, &dx)
}

/// Sample `x` and `e` independently and uniformly in radius balls and
/// report every sample with negative slack beyond rounding.
pub fn check_iss_inequality(
    ncs: &NcsSystem,
    v: &dyn LyapunovFunction,
    alpha: &Polynomial,
    gamma: &Polynomial,
    samples: usize,
    radius: f64,
    seed: u64,
) -> IssReport {
    let mut rng = seeded_rng(seed);
    let mut worst = f64::INFINITY;
    let mut violations = Vec::new();
    for _ in 0..samples {
        let x = uniform_in_ball(&mut rng, ncs.state_dim(), radius);
        let e = uniform_in_ball(&mut rng, ncs.error_dim(), radius);
        let slack = iss_slack(ncs, v, alpha, gamma, &x, &e);
        worst = worst.min(slack);
        let rounding = 1e-12 * (1.0 + gamma.value(norm(&e)) + alpha.value(v.value(&x)));
        if slack < -rounding {
            violations.push(IssViolation { x, e, slack });
        }
    }
    IssReport { samples, worst_slack: worst, violations }
}
