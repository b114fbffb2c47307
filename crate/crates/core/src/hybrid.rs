//! Generic hybrid-system simulation over hybrid time domains.
//!
//! A [`HybridSystem`] flows while its scalar guard is negative and jumps once
//! the guard reaches zero. The engine integrates the flow with an adaptive
//! Dormand–Prince pair, localizes the guard crossing on the dense output, and
//! records the solution as alternating flow segments and jumps.
//!
//! Jumps take priority on the closed jump set: a state whose guard is `>= 0`
//! jumps before any flow is attempted. A run of jumps at one continuous time
//! longer than [`IntegratorConfig::max_consecutive_jumps`] aborts with
//! [`HybridError::ConsecutiveJumpOverflow`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode;

/// Point of a hybrid time domain: continuous time and jump count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HybridTime {
    pub t: f64,
    pub j: u64,
}

/// Continuous values plus the discrete counter that stays constant on flows.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub values: Vec<f64>,
    pub counter: u64,
}

impl HybridState {
    pub fn new(values: Vec<f64>, counter: u64) -> Self {
        Self { values, counter }
    }
}

/// Flow map, jump map and guard of a hybrid system.
///
/// The guard is negative strictly inside the flow set, zero on the common
/// boundary and positive strictly inside the jump set.
pub trait HybridSystem {
    fn dim(&self) -> usize;
    fn flow(&self, counter: u64, q: &[f64], dq: &mut [f64]);
    fn guard(&self, counter: u64, q: &[f64]) -> f64;
    /// Jump map. An `Err` aborts the simulation with
    /// [`HybridError::JumpFailed`].
    fn jump(&self, state: &HybridState) -> Result<HybridState, String>;
}

impl<S: HybridSystem + ?Sized> HybridSystem for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn flow(&self, counter: u64, q: &[f64], dq: &mut [f64]) {
        (**self).flow(counter, q, dq)
    }
    fn guard(&self, counter: u64, q: &[f64]) -> f64 {
        (**self).guard(counter, q)
    }
    fn jump(&self, state: &HybridState) -> Result<HybridState, String> {
        (**self).jump(state)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("{count} consecutive jumps at t = {t}: jump map leaves the state in the jump set")]
    ConsecutiveJumpOverflow { t: f64, count: u32 },
    #[error("jump map failed at t = {t}: {reason}")]
    JumpFailed { t: f64, reason: String },
    #[error("trajectory has no jumps")]
    EmptyTrajectory,
    #[error("state has dimension {got}, system expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
}

/// How densely flow segments are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Recording {
    /// One sample per accepted step plus the localized endpoint.
    #[default]
    EveryStep,
    /// Only the first and last sample of each segment.
    Endpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub event_time_tol: f64,
    /// Absolute end time of the simulation, in seconds.
    pub horizon: f64,
    pub max_jumps: u64,
    pub max_consecutive_jumps: u32,
    pub recording: Recording,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.01,
            event_time_tol: 1e-9,
            horizon: 1.0,
            max_jumps: 10_000_000,
            max_consecutive_jumps: 8,
            recording: Recording::EveryStep,
        }
    }
}

impl IntegratorConfig {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<(), HybridError> {
        let positive = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("max_step", self.max_step),
            ("event_time_tol", self.event_time_tol),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(HybridError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_jumps == 0 {
            return Err(HybridError::InvalidConfig("max_jumps must be positive".into()));
        }
        if self.max_consecutive_jumps == 0 {
            return Err(HybridError::InvalidConfig("max_consecutive_jumps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub values: Vec<f64>,
}

/// Sampled arc of one flow interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowArc {
    pub samples: Vec<Sample>,
    /// True when the arc ended on a localized guard crossing.
    pub hit: bool,
}

impl FlowArc {
    pub fn end(&self) -> &Sample {
        self.samples.last().expect("flow arc always holds its start sample")
    }
}

/// Integrate the flow from `state` at time `start` until the guard reaches
/// zero or `config.horizon` is reached.
pub fn integrate_flow<S: HybridSystem + ?Sized>(
    system: &S,
    start: f64,
    state: &HybridState,
    config: &IntegratorConfig,
) -> Result<FlowArc, HybridError> {
    config.validate()?;
    let n = system.dim();
    if state.values.len() != n {
        return Err(HybridError::DimensionMismatch { expected: n, got: state.values.len() });
    }
    if state.values.iter().any(|v| !v.is_finite()) {
        return Err(HybridError::NonFiniteState { t: start });
    }
    let counter = state.counter;
    let f = |q: &[f64], dq: &mut [f64]| system.flow(counter, q, dq);
    let guard = |q: &[f64]| system.guard(counter, q);

    let mut samples = vec![Sample { t: start, values: state.values.clone() }];
    let mut g_prev = guard(&state.values);
    if g_prev > 0.0 {
        return Ok(FlowArc { samples, hit: true });
    }
    let mut armed = g_prev < 0.0;

    let mut t = start;
    let mut y = state.values.clone();
    let mut k1 = vec![0.0; n];
    f(&y, &mut k1);
    let remaining = config.horizon - t;
    if remaining <= 0.0 {
        return Ok(FlowArc { samples, hit: false });
    }
    let mut h = ode::initial_step(&f, &y, &k1, config.rel_tol, config.abs_tol, config.max_step)
        .min(remaining);
    let mut nonfinite_rejections = 0u32;

    loop {
        let remaining = config.horizon - t;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        // Only a step shrunk by rejections counts as underflow; a small
        // proposal grows again on acceptance.
        let min_step = 1e-14 * t.abs().max(1.0);
        let step = ode::trial_step(&f, &y, &k1, h, config.rel_tol, config.abs_tol);
        if !step.error.is_finite() || step.y_new.iter().any(|v| !v.is_finite()) {
            nonfinite_rejections += 1;
            if nonfinite_rejections > 40 {
                return Err(HybridError::NonFiniteState { t: t + h });
            }
            h *= 0.2;
            continue;
        }
        nonfinite_rejections = 0;
        if step.error > 1.0 {
            let fac = (0.9 * step.error.powf(-0.2)).clamp(0.2, 1.0);
            h *= fac;
            if h < min_step {
                return Err(HybridError::StepUnderflow { t, h });
            }
            continue;
        }

        let t_new = if last { config.horizon } else { t + h };
        let g_new = guard(&step.y_new);
        let triggered = |g: f64, armed: bool| if armed { g >= 0.0 } else { g > 0.0 };
        if triggered(g_new, armed) {
            let dense = step.dense(t, h, &y);
            let (t_hit, y_hit) =
                localize(&dense, &guard, (t, g_prev), (t_new, g_new), &step.y_new, armed, config);
            if config.recording == Recording::Endpoints && samples.len() > 1 {
                samples.truncate(1);
            }
            samples.push(Sample { t: t_hit, values: y_hit });
            return Ok(FlowArc { samples, hit: true });
        }
        if g_new < 0.0 {
            armed = true;
        }
        g_prev = g_new;

        let fac = if step.error == 0.0 { 5.0 } else { (0.9 * step.error.powf(-0.2)).clamp(0.2, 5.0) };
        t = t_new;
        k1.copy_from_slice(step.end_derivative());
        y = step.y_new;
        match config.recording {
            Recording::EveryStep => samples.push(Sample { t, values: y.clone() }),
            Recording::Endpoints if last => samples.push(Sample { t, values: y.clone() }),
            Recording::Endpoints => {}
        }
        if last {
            return Ok(FlowArc { samples, hit: false });
        }
        h = (h * fac).min(config.max_step);
    }
}

/// Shrink `[lo, hi]` around the first time the guard triggers, alternating
/// regula-falsi (Illinois-weighted) and bisection steps.
fn localize<G: Fn(&[f64]) -> f64>(
    dense: &ode::DenseStep,
    guard: &G,
    (mut lo, mut g_lo): (f64, f64),
    (mut hi, mut g_hi): (f64, f64),
    y_hi_end: &[f64],
    armed: bool,
    config: &IntegratorConfig,
) -> (f64, Vec<f64>) {
    let n = y_hi_end.len();
    let mut y_hi = y_hi_end.to_vec();
    let mut y = vec![0.0; n];
    let mut stale_lo = 0u32;
    let mut stale_hi = 0u32;
    let mut iter = 0u32;
    while hi - lo > config.event_time_tol && iter < 200 {
        iter += 1;
        let width = hi - lo;
        let mut t = if armed && iter % 2 == 1 && g_hi != g_lo {
            let mut wl = g_lo;
            let mut wh = g_hi;
            if stale_lo >= 2 {
                wh *= 0.5;
            }
            if stale_hi >= 2 {
                wl *= 0.5;
            }
            lo - wl * (hi - lo) / (wh - wl)
        } else {
            lo + 0.5 * width
        };
        if !(t > lo && t < hi) {
            t = lo + 0.5 * width;
        }
        dense.eval(t, &mut y);
        let g = guard(&y);
        let hit = if armed { g >= 0.0 } else { g > 0.0 };
        if hit {
            hi = t;
            g_hi = g;
            y_hi.copy_from_slice(&y);
            stale_lo += 1;
            stale_hi = 0;
        } else {
            lo = t;
            g_lo = g;
            stale_hi += 1;
            stale_lo = 0;
        }
    }
    (hi, y_hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: HybridTime,
    pub counter: u64,
    pub samples: Vec<Sample>,
}

impl Segment {
    pub fn end(&self) -> &Sample {
        self.samples.last().expect("segment always holds its start sample")
    }

    pub fn duration(&self) -> f64 {
        self.end().t - self.start.t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    /// Hybrid time of the pre-jump state; the post-jump state lives at `j + 1`.
    pub at: HybridTime,
    pub pre: HybridState,
    pub post: HybridState,
    /// Guard value at the pre-jump state.
    pub guard: f64,
    /// True when the jump ended a flow (guard crossing); false for a jump
    /// taken immediately after another one.
    pub after_flow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    MaxJumps,
    /// The observer asked to stop.
    Stopped,
}

/// Solution over a hybrid time domain: flow segments separated by jumps.
///
/// Segment `k` ends where jump `k` occurs and segment `k + 1` starts from the
/// post-jump state of jump `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTrajectory {
    pub segments: Vec<Segment>,
    pub jumps: Vec<JumpRecord>,
    pub termination: Termination,
}

impl HybridTrajectory {
    pub fn final_state(&self) -> HybridState {
        let seg = self.segments.last().expect("trajectory always has a segment");
        HybridState::new(seg.end().values.clone(), seg.counter)
    }

    pub fn final_time(&self) -> HybridTime {
        let seg = self.segments.last().expect("trajectory always has a segment");
        HybridTime { t: seg.end().t, j: seg.start.j }
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| j.at.t).collect()
    }

    /// Check the hybrid-time-domain ordering and segment/jump linkage.
    pub fn check_time_domain(&self) -> Result<(), String> {
        if self.segments.len() != self.jumps.len() + 1 {
            return Err(format!(
                "{} segments for {} jumps",
                self.segments.len(),
                self.jumps.len()
            ));
        }
        let mut last_t = f64::NEG_INFINITY;
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.start.j != k as u64 {
                return Err(format!("segment {k} starts at j = {}", seg.start.j));
            }
            if seg.start.t < last_t {
                return Err(format!("segment {k} starts before the previous one ends"));
            }
            let mut prev = seg.start.t;
            if seg.samples.first().map(|s| s.t) != Some(seg.start.t) {
                return Err(format!("segment {k} first sample is not at its start time"));
            }
            for s in &seg.samples {
                if s.t < prev {
                    return Err(format!("segment {k} samples decrease in time"));
                }
                prev = s.t;
            }
            last_t = prev;
            if let Some(jump) = self.jumps.get(k) {
                if jump.at.j != k as u64 || jump.at.t != seg.end().t {
                    return Err(format!("jump {k} does not sit at the end of segment {k}"));
                }
                if jump.pre.values != seg.end().values || jump.pre.counter != seg.counter {
                    return Err(format!("jump {k} pre-state differs from segment end"));
                }
                let next = &self.segments[k + 1];
                if next.start.t != jump.at.t || next.samples[0].values != jump.post.values {
                    return Err(format!("segment {} does not start at jump {k}'s post-state", k + 1));
                }
            }
        }
        Ok(())
    }
}

/// Receives a solution piece by piece, in hybrid-time order: segment 0,
/// jump 0, segment 1, ... Lets long runs be analysed without storing them.
pub trait TrajectoryObserver {
    fn segment(&mut self, segment: Segment);
    fn jump(&mut self, jump: JumpRecord);

    /// Checked after every jump; `true` ends the run with
    /// [`Termination::Stopped`].
    fn should_stop(&self) -> bool {
        false
    }
}

/// Endpoint of a streamed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_state: HybridState,
    pub final_time: HybridTime,
    pub termination: Termination,
}

struct Collector {
    segments: Vec<Segment>,
    jumps: Vec<JumpRecord>,
}

impl TrajectoryObserver for Collector {
    fn segment(&mut self, segment: Segment) {
        self.segments.push(segment);
    }
    fn jump(&mut self, jump: JumpRecord) {
        self.jumps.push(jump);
    }
}

/// Alternate flows and jumps from `initial` until the horizon, the jump
/// budget, or an error.
pub fn simulate_hybrid<S: HybridSystem + ?Sized>(
    system: &S,
    initial: &HybridState,
    config: &IntegratorConfig,
) -> Result<HybridTrajectory, HybridError> {
    let mut collector = Collector { segments: Vec::new(), jumps: Vec::new() };
    let summary = simulate_hybrid_observed(system, initial, config, &mut collector)?;
    Ok(HybridTrajectory {
        segments: collector.segments,
        jumps: collector.jumps,
        termination: summary.termination,
    })
}

/// [`simulate_hybrid`] feeding each segment and jump to `observer` instead of
/// collecting them.
pub fn simulate_hybrid_observed<S: HybridSystem + ?Sized, O: TrajectoryObserver + ?Sized>(
    system: &S,
    initial: &HybridState,
    config: &IntegratorConfig,
    observer: &mut O,
) -> Result<RunSummary, HybridError> {
    config.validate()?;
    if initial.values.len() != system.dim() {
        return Err(HybridError::DimensionMismatch {
            expected: system.dim(),
            got: initial.values.len(),
        });
    }
    let mut state = initial.clone();
    let mut t = 0.0;
    let mut j = 0u64;
    let mut consecutive = 0u32;

    loop {
        let start = HybridTime { t, j };
        if j >= config.max_jumps {
            observer.segment(Segment {
                start,
                counter: state.counter,
                samples: vec![Sample { t, values: state.values.clone() }],
            });
            return Ok(RunSummary { final_state: state, final_time: start, termination: Termination::MaxJumps });
        }

        let g = system.guard(state.counter, &state.values);
        let (arc, after_flow) = if g >= 0.0 {
            (FlowArc { samples: vec![Sample { t, values: state.values.clone() }], hit: true }, false)
        } else {
            (integrate_flow(system, t, &state, config)?, true)
        };
        let end = arc.end().clone();
        let hit = arc.hit;
        observer.segment(Segment { start, counter: state.counter, samples: arc.samples });
        if !hit {
            let final_state = HybridState::new(end.values, state.counter);
            return Ok(RunSummary {
                final_state,
                final_time: HybridTime { t: end.t, j },
                termination: Termination::Horizon,
            });
        }

        consecutive = if after_flow && end.t > t { 1 } else { consecutive + 1 };
        if consecutive > config.max_consecutive_jumps {
            return Err(HybridError::ConsecutiveJumpOverflow { t: end.t, count: consecutive });
        }
        let pre = HybridState::new(end.values, state.counter);
        let post = system.jump(&pre).map_err(|reason| HybridError::JumpFailed { t: end.t, reason })?;
        if post.values.len() != system.dim() {
            return Err(HybridError::DimensionMismatch { expected: system.dim(), got: post.values.len() });
        }
        if post.values.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::NonFiniteState { t: end.t });
        }
        observer.jump(JumpRecord {
            at: HybridTime { t: end.t, j },
            guard: system.guard(pre.counter, &pre.values),
            pre,
            post: post.clone(),
            after_flow,
        });
        t = end.t;
        j += 1;
        state = post;
        if observer.should_stop() {
            let start = HybridTime { t, j };
            observer.segment(Segment {
                start,
                counter: state.counter,
                samples: vec![Sample { t, values: state.values.clone() }],
            });
            return Ok(RunSummary { final_state: state, final_time: start, termination: Termination::Stopped });
        }
    }
}

/// Durations between consecutive jumps, the first measured from `t = 0`.
pub fn inter_jump_intervals(traj: &HybridTrajectory) -> Result<Vec<f64>, HybridError> {
    if traj.jumps.is_empty() {
        return Err(HybridError::EmptyTrajectory);
    }
    let mut prev = traj.segments.first().map(|s| s.start.t).unwrap_or(0.0);
    Ok(traj
        .jumps
        .iter()
        .map(|jump| {
            let d = jump.at.t - prev;
            prev = jump.at.t;
            d
        })
        .collect())
}
