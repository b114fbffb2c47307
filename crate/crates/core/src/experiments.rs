//! Experiment harness: declarative configs, single runs, Monte-Carlo
//! ensembles, property checks and CSV/text export.
//!
//! Dynamics are not expressible in config files; a config names one of the
//! built-in systems and supplies policy parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functions::{jet_iss_decay, jet_iss_gain, JetEngineLyapunov, LyapunovFunction, Polynomial};
use crate::hybrid::{
    simulate_hybrid_observed, HybridError, HybridState, HybridSystem, IntegratorConfig, JumpRecord, Segment,
    Termination, TrajectoryObserver,
};
use crate::monitor::{check_iss_inequality, IssReport, Monitor, MonitorReport, Tolerances, LyapunovSpec};
use crate::ncs::{jet_engine_system, scalar_clock_fixture, ModelError, NcsSystem};
use crate::protocols::{verify_ugas_contraction, ContractionReport, EuclideanCertificate, Protocol, ProtocolCertificate, Schedule};
use crate::sampling::{seeded_rng, uniform_in_ball};
use crate::triggers::{
    scalar_fixture_lyapunov, self_triggered_wrap, ClockGains, ClockPolicy, ClosedLoop, ConstantClockGains,
    NaiveThresholdPolicy, PeriodicPolicy, SelfTrigger, SelfTriggeredLoop, SelfTriggeredPolicy, StateLayout,
    ThresholdGamma, ThresholdPolicy, ThresholdTerm, TransmissionPolicy, TriggerError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Simulation(#[from] HybridError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    JetEngine,
    ScalarClockFixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Threshold,
    Clock,
    Periodic,
    SelfThreshold,
    SelfClock,
    /// Threshold rule without `η`; a negative control.
    NaiveThreshold,
}

impl PolicyName {
    pub const ALL: [PolicyName; 6] = [
        Self::Threshold,
        Self::Clock,
        Self::Periodic,
        Self::SelfThreshold,
        Self::SelfClock,
        Self::NaiveThreshold,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Threshold => "threshold",
            Self::Clock => "clock",
            Self::Periodic => "periodic",
            Self::SelfThreshold => "self_threshold",
            Self::SelfClock => "self_clock",
            Self::NaiveThreshold => "naive_threshold",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == name)
    }
}

impl std::fmt::Display for PolicyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x: Option<Vec<f64>>,
    pub e: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub count: usize,
    pub radius: f64,
    pub seed: u64,
    /// Stop a run once `R` certifies `|x| < 0.01` for all later times,
    /// instead of simulating to the horizon.
    pub certified_stop: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { count: 200, radius: 1.0, seed: 42, certified_stop: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    /// `γ̃` coefficients in ascending powers.
    pub gamma_tilde: Vec<f64>,
    /// `δ` coefficients in ascending powers.
    pub decay: Vec<f64>,
    pub eta0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub l: f64,
    pub g: f64,
    /// Reset value; the range is `[aρ², a]`.
    pub a: Option<f64>,
    /// Defaults to the protocol certificate's `ρ`.
    pub rho: Option<f64>,
    /// Explicit range `[b, c]`, for `ρ = 0`.
    pub b: Option<f64>,
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicConfig {
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTriggeredConfig {
    pub t_star: f64,
    pub epsilon: f64,
    /// Weights for `γ̃(W) − η`.
    pub eta_weights: Option<Vec<f64>>,
    /// Weights for `γ̃(W) − V`.
    pub lyapunov_weights: Option<Vec<f64>>,
    /// Weights for the clock trigger `aρ² − η`; defaults to `(1, t*)`.
    pub clock_weights: Option<Vec<f64>>,
}

impl Default for SelfTriggeredConfig {
    fn default() -> Self {
        Self { t_star: 1e-3, epsilon: 1e-4, eta_weights: None, lyapunov_weights: None, clock_weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Certified `γ̃` used in `R`; defaults to the trigger's `γ̃`.
    pub gamma_tilde: Option<Vec<f64>>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub strict_floor: f64,
    /// Relative tolerance of the base guard during self-triggered flows.
    pub guard_rel_tol: f64,
    /// Absolute tolerance of the post-jump guard.
    pub membership_tol: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        let t = Tolerances::default();
        Self {
            gamma_tilde: None,
            rel_tol: t.rel,
            abs_tol: t.abs,
            strict_floor: t.strict_floor,
            guard_rel_tol: 1e-6,
            membership_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub protocol_samples: usize,
    pub iss_samples: usize,
    pub radius: f64,
    pub seed: u64,
    /// Factor applied to the ISS gain `γ`; below one makes a negative control.
    pub iss_gain_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { protocol_samples: 100_000, iss_samples: 10_000, radius: 1.0, seed: 42, iss_gain_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

fn default_protocol() -> String {
    "tod".into()
}

fn default_horizon() -> f64 {
    200.0
}

/// Parsed experiment file. `horizon` replaces `integrator.horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemName,
    #[serde(default = "default_protocol")]
    pub protocol: String,
    #[serde(default)]
    pub policies: Vec<PolicyName>,
    /// Simulation end time, seconds.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Only transmissions at or before this time enter interval
    /// statistics; defaults to `horizon`.
    pub timing_horizon: Option<f64>,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    pub threshold: Option<ThresholdConfig>,
    pub clock: Option<ClockConfig>,
    pub periodic: Option<PeriodicConfig>,
    #[serde(default)]
    pub self_triggered: SelfTriggeredConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|source| ExperimentError::Parse { path: path.into(), source })
    }

    pub fn timing_horizon(&self) -> f64 {
        self.timing_horizon.unwrap_or(self.horizon)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        self.integrator.clone().with_horizon(self.horizon)
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances { rel: self.monitor.rel_tol, abs: self.monitor.abs_tol, strict_floor: self.monitor.strict_floor }
    }
}

/// Built-in system, its Lyapunov function and the configured protocol.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub ncs: NcsSystem,
    pub lyapunov: Arc<dyn LyapunovFunction>,
    pub protocol: Protocol,
}

/// Hybrid model of one policy, ready to simulate.
#[derive(Clone)]
pub enum LoopModel {
    Event(ClosedLoop),
    SelfTriggered(SelfTriggeredLoop),
}

impl LoopModel {
    pub fn base(&self) -> &ClosedLoop {
        match self {
            Self::Event(l) => l,
            Self::SelfTriggered(s) => &s.base,
        }
    }

    pub fn system(&self) -> &dyn HybridSystem {
        match self {
            Self::Event(l) => l,
            Self::SelfTriggered(s) => s,
        }
    }

    pub fn initial_state(&self, x0: &[f64], e0: &[f64]) -> Result<HybridState, TriggerError> {
        match self {
            Self::Event(l) => l.initial_state(x0, e0),
            Self::SelfTriggered(s) => s.initial_state(x0, e0),
        }
    }
}

#[derive(Clone)]
pub struct BuiltPolicy {
    pub name: PolicyName,
    pub model: LoopModel,
    pub spec: Option<LyapunovSpec>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.integrator().validate()?;
        if !(config.horizon > 0.0) {
            return Err(config_err("horizon must be positive"));
        }
        let (ncs, lyapunov): (NcsSystem, Arc<dyn LyapunovFunction>) = match config.system {
            SystemName::JetEngine => (jet_engine_system(), Arc::new(JetEngineLyapunov)),
            SystemName::ScalarClockFixture => (scalar_clock_fixture(), Arc::new(scalar_fixture_lyapunov())),
        };
        let protocol = match Schedule::from_name(&config.protocol) {
            Some(Schedule::TryOnceDiscard) => Protocol::tod(ncs.partition.clone()),
            Some(Schedule::RoundRobin) => Protocol::round_robin(ncs.partition.clone()),
            None => return Err(config_err(format!("unknown protocol {:?}; expected \"tod\" or \"rr\"", config.protocol))),
        };
        Ok(Self { config, ncs, lyapunov, protocol })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::of(&self.ncs)
    }

    pub fn default_initial_x(&self) -> Vec<f64> {
        match &self.config.initial.x {
            Some(x) => x.clone(),
            None => match self.config.system {
                SystemName::JetEngine => vec![0.95, -0.14],
                SystemName::ScalarClockFixture => vec![1.0],
            },
        }
    }

    pub fn initial_e(&self) -> Vec<f64> {
        self.config.initial.e.clone().unwrap_or_else(|| vec![0.0; self.ncs.error_dim()])
    }

    fn threshold_policy(&self) -> Result<ThresholdPolicy, ExperimentError> {
        match (&self.config.threshold, self.config.system) {
            (Some(t), _) => Ok(ThresholdPolicy::new(
                Polynomial::new(t.gamma_tilde.clone()),
                Polynomial::new(t.decay.clone()),
                t.eta0,
                self.lyapunov.clone(),
            )?),
            (None, SystemName::JetEngine) => Ok(ThresholdPolicy::jet()),
            (None, _) => Err(config_err("threshold policies need a [threshold] section for this system")),
        }
    }

    fn clock_policy(&self) -> Result<ClockPolicy, ExperimentError> {
        let Some(c) = &self.config.clock else {
            return match self.config.system {
                SystemName::ScalarClockFixture => Ok(ClockPolicy::scalar_fixture()),
                _ => Err(config_err("clock policies need a [clock] section for this system")),
            };
        };
        let gains: Arc<dyn ClockGains> = Arc::new(ConstantClockGains { l: c.l, g: c.g });
        match (c.b, c.c, c.a) {
            (Some(b), Some(upper), None) => Ok(ClockPolicy::with_range(gains, b, upper)?),
            (None, None, Some(a)) => {
                let rho = match c.rho {
                    Some(r) => r,
                    None => self
                        .protocol
                        .certificate
                        .as_ref()
                        .map(|cert| cert.rho())
                        .ok_or_else(|| config_err("[clock] needs rho when the protocol has no certificate"))?,
                };
                Ok(ClockPolicy::new(gains, a, rho)?)
            }
            _ => Err(config_err("[clock] needs either a (with optional rho) or both b and c")),
        }
    }

    fn periodic_policy(&self) -> Result<PeriodicPolicy, ExperimentError> {
        let period = match (&self.config.periodic, self.config.system) {
            (Some(p), _) => p.period,
            (None, SystemName::JetEngine) => 0.010,
            (None, _) => return Err(config_err("periodic policies need a [periodic] section for this system")),
        };
        Ok(PeriodicPolicy::new(period)?)
    }

    fn monitor_gamma(&self, trigger: &ThresholdPolicy) -> Polynomial {
        self.config.monitor.gamma_tilde.clone().map(Polynomial::new).unwrap_or_else(|| trigger.gamma_tilde.clone())
    }

    fn threshold_spec(&self, trigger: &ThresholdPolicy) -> LyapunovSpec {
        LyapunovSpec::threshold(self.lyapunov.clone(), self.monitor_gamma(trigger), self.protocol.clone(), self.layout())
    }

    fn clock_spec(&self, clock: &ClockPolicy) -> LyapunovSpec {
        let a = clock.upper;
        let rho = (clock.lower / clock.upper).sqrt();
        LyapunovSpec::clock(self.lyapunov.clone(), self.protocol.clone(), self.layout(), a, rho)
    }

    fn closed_loop(&self, policy: Arc<dyn TransmissionPolicy>) -> Result<ClosedLoop, ExperimentError> {
        Ok(ClosedLoop::new(self.ncs.clone(), self.protocol.clone(), policy)?)
    }

    pub fn build(&self, name: PolicyName) -> Result<BuiltPolicy, ExperimentError> {
        let st = &self.config.self_triggered;
        let (model, spec) = match name {
            PolicyName::Threshold => {
                let p = self.threshold_policy()?;
                let spec = self.threshold_spec(&p);
                (LoopModel::Event(self.closed_loop(Arc::new(p))?), Some(spec))
            }
            PolicyName::NaiveThreshold => {
                let p = self.threshold_policy()?;
                let naive = NaiveThresholdPolicy { gamma_tilde: p.gamma_tilde.clone(), lyapunov: self.lyapunov.clone() };
                (LoopModel::Event(self.closed_loop(Arc::new(naive))?), None)
            }
            PolicyName::Clock => {
                let p = self.clock_policy()?;
                let spec = self.clock_spec(&p);
                (LoopModel::Event(self.closed_loop(Arc::new(p))?), Some(spec))
            }
            PolicyName::Periodic => (LoopModel::Event(self.closed_loop(Arc::new(self.periodic_policy()?))?), None),
            PolicyName::SelfThreshold => {
                let p = self.threshold_policy()?;
                let spec = self.threshold_spec(&p);
                let base = self.closed_loop(Arc::new(p.clone()))?;
                let defaults = self.config.system == SystemName::JetEngine;
                let published = SelfTriggeredPolicy::jet(&p, &self.protocol, self.layout());
                let weights = |given: &Option<Vec<f64>>, k: usize| -> Option<Vec<f64>> {
                    given.clone().or_else(|| defaults.then(|| published.triggers[k].coefficients.clone()))
                };
                let mut triggers = Vec::new();
                for (k, (term, given)) in
                    [(ThresholdTerm::Eta, &st.eta_weights), (ThresholdTerm::Lyapunov, &st.lyapunov_weights)]
                        .into_iter()
                        .enumerate()
                {
                    if let Some(coefficients) = weights(given, k) {
                        let function = Arc::new(ThresholdGamma {
                            term,
                            policy: p.clone(),
                            protocol: self.protocol.clone(),
                            layout: self.layout(),
                        });
                        triggers.push(SelfTrigger { function, coefficients });
                    }
                }
                let stp = SelfTriggeredPolicy::new(triggers, st.t_star, st.epsilon)?;
                (LoopModel::SelfTriggered(self_triggered_wrap(base, stp)), Some(spec))
            }
            PolicyName::SelfClock => {
                let p = self.clock_policy()?;
                let spec = self.clock_spec(&p);
                let mut stp = SelfTriggeredPolicy::clock(&p, self.layout(), st.t_star, st.epsilon)?;
                if let Some(w) = &st.clock_weights {
                    stp.triggers[0].coefficients = w.clone();
                    stp = SelfTriggeredPolicy::new(stp.triggers, st.t_star, st.epsilon)?;
                }
                let base = self.closed_loop(Arc::new(p))?;
                (LoopModel::SelfTriggered(self_triggered_wrap(base, stp)), Some(spec))
            }
        };
        Ok(BuiltPolicy { name, model, spec })
    }

    /// Initial plant/controller states of the ensemble, uniform in the ball.
    pub fn ensemble_initial_conditions(&self) -> Vec<Vec<f64>> {
        let e = &self.config.ensemble;
        let mut rng = seeded_rng(e.seed);
        (0..e.count).map(|_| uniform_in_ball(&mut rng, self.ncs.state_dim(), e.radius)).collect()
    }
}

/// One transmission: time, granted node (1-based), pre-jump node error
/// norms and the interval since the previous transmission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transmission {
    pub t: f64,
    pub node: usize,
    pub e_abs: Vec<f64>,
    pub interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub policy: PolicyName,
    pub x0: Vec<f64>,
    pub termination: Termination,
    pub final_t: f64,
    pub jumps: u64,
    pub first_transmission: Option<f64>,
    /// Mean inter-transmission time over the timing window.
    pub mean_interval: Option<f64>,
    pub monitor: MonitorReport,
    /// Empty unless requested.
    pub transmissions: Vec<Transmission>,
}

struct Recorder<'a> {
    monitor: Monitor<'a>,
    protocol: &'a Protocol,
    layout: StateLayout,
    keep_log: bool,
    log: Vec<Transmission>,
    jumps: u64,
    last_t: f64,
    first: Option<f64>,
}

impl TrajectoryObserver for Recorder<'_> {
    fn segment(&mut self, segment: Segment) {
        self.monitor.segment(segment);
    }

    fn jump(&mut self, jump: JumpRecord) {
        let t = jump.at.t;
        if self.keep_log {
            let e = self.layout.e(&jump.pre.values);
            self.log.push(Transmission {
                t,
                node: self.protocol.select(jump.pre.counter, e) + 1,
                e_abs: self.protocol.partition.node_norms(e),
                interval: t - self.last_t,
            });
        }
        self.first.get_or_insert(t);
        self.last_t = t;
        self.jumps += 1;
        self.monitor.jump(jump);
    }

    fn should_stop(&self) -> bool {
        self.monitor.should_stop()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub keep_log: bool,
    pub certified_stop: bool,
}

/// Simulate one policy from `x0` (with the configured initial `e`) and
/// monitor it.
pub fn run_single(
    exp: &Experiment,
    built: &BuiltPolicy,
    x0: &[f64],
    opts: RunOptions,
) -> Result<RunRecord, ExperimentError> {
    let cfg = &exp.config;
    let q0 = built.model.initial_state(x0, &exp.initial_e())?;
    let tol = exp.config.tolerances();
    let base = built.model.base();
    let mut monitor = match &built.spec {
        Some(spec) => Monitor::new(spec, tol),
        None => Monitor::without_spec(exp.layout(), tol),
    }
    .with_membership(base, cfg.monitor.membership_tol)
    .with_interval_cutoff(cfg.timing_horizon());
    if matches!(built.model, LoopModel::SelfTriggered(_)) {
        monitor = monitor.with_flow_guard(base, cfg.monitor.guard_rel_tol);
    }
    if opts.certified_stop {
        monitor = monitor.with_certified_stop(cfg.timing_horizon());
    }
    let mut rec = Recorder {
        monitor,
        protocol: &exp.protocol,
        layout: exp.layout(),
        keep_log: opts.keep_log,
        log: Vec::new(),
        jumps: 0,
        last_t: 0.0,
        first: None,
    };
    let mut integrator = exp.config.integrator();
    if opts.certified_stop && built.spec.is_none() {
        // Nothing to certify: only the timing window is of interest.
        integrator.horizon = integrator.horizon.min(cfg.timing_horizon());
    }
    let summary = simulate_hybrid_observed(built.model.system(), &q0, &integrator, &mut rec)?;
    let monitor = rec.monitor.finish();
    Ok(RunRecord {
        policy: built.name,
        x0: x0.to_vec(),
        termination: summary.termination,
        final_t: summary.final_time.t,
        jumps: rec.jumps,
        first_transmission: rec.first,
        mean_interval: monitor.dwell.as_ref().map(|d| d.mean),
        monitor,
        transmissions: rec.log,
    })
}

/// Time of the first jump of the event-triggered `base` loop from `state`
/// (its `(x, e, η)` prefix), or `None` within `config.horizon`.
pub fn event_crossing_time(
    base: &ClosedLoop,
    state: &HybridState,
    config: &IntegratorConfig,
) -> Result<Option<f64>, HybridError> {
    let q = HybridState::new(state.values[..base.dim()].to_vec(), state.counter);
    if base.guard(q.counter, &q.values) >= 0.0 {
        return Ok(Some(0.0));
    }
    let arc = crate::hybrid::integrate_flow(base, 0.0, &q, config)?;
    Ok(arc.hit.then(|| arc.end().t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub policy: PolicyName,
    pub index: usize,
    pub outcome: Result<RunRecord, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: PolicyName,
    /// Mean over runs of each run's mean interval.
    pub mean_interval: Option<f64>,
    /// All intervals of all runs pooled.
    pub pooled_mean: Option<f64>,
    pub min_dwell: Option<f64>,
    /// Runs entering the mean.
    pub runs: usize,
    /// Completed runs without any transmission in the timing window.
    pub no_jump_runs: Vec<usize>,
    pub aborted: Vec<(usize, String)>,
    pub violations: u64,
    pub converged: usize,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub initial_conditions: Vec<Vec<f64>>,
    pub summaries: Vec<PolicySummary>,
    pub rows: Vec<RunRow>,
}

impl EnsembleReport {
    pub fn summary(&self, policy: PolicyName) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }

    pub fn records(&self, policy: PolicyName) -> impl Iterator<Item = &RunRecord> {
        self.rows.iter().filter(move |r| r.policy == policy).filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn clean(&self) -> bool {
        self.summaries.iter().all(|s| s.violations == 0 && s.aborted.is_empty())
    }
}

fn summarize(policy: PolicyName, rows: &[RunRow]) -> PolicySummary {
    let mut means = Vec::new();
    let mut pooled_sum = 0.0;
    let mut pooled_count = 0u64;
    let mut min_dwell: Option<f64> = None;
    let mut no_jump_runs = Vec::new();
    let mut aborted = Vec::new();
    let mut violations = 0;
    let mut converged = 0;
    let mut completed = 0;
    for row in rows.iter().filter(|r| r.policy == policy) {
        match &row.outcome {
            Err(msg) => aborted.push((row.index, msg.clone())),
            Ok(rec) => {
                completed += 1;
                violations += rec.monitor.violation_count();
                converged += rec.monitor.converged as usize;
                match &rec.monitor.dwell {
                    Some(d) => {
                        means.push(d.mean);
                        pooled_sum += d.mean * d.count as f64;
                        pooled_count += d.count;
                        min_dwell = Some(min_dwell.map_or(d.min, |m| m.min(d.min)));
                    }
                    None => no_jump_runs.push(row.index),
                }
            }
        }
    }
    PolicySummary {
        policy,
        mean_interval: (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64),
        pooled_mean: (pooled_count > 0).then(|| pooled_sum / pooled_count as f64),
        min_dwell,
        runs: means.len(),
        no_jump_runs,
        aborted,
        violations,
        converged,
        completed,
    }
}

/// Run every configured policy from the same sampled initial conditions.
/// Aborted runs are kept as errors and excluded from the statistics.
pub fn run_ensemble(exp: &Experiment) -> Result<EnsembleReport, ExperimentError> {
    if exp.config.ensemble.count == 0 {
        return Err(config_err("ensemble.count must be at least 1"));
    }
    if exp.config.policies.is_empty() {
        return Err(config_err("no policies configured"));
    }
    let built: Vec<BuiltPolicy> = exp.config.policies.iter().map(|p| exp.build(*p)).collect::<Result<_, _>>()?;
    let ics = exp.ensemble_initial_conditions();
    let opts = RunOptions { keep_log: false, certified_stop: exp.config.ensemble.certified_stop };
    let tasks: Vec<(usize, usize)> = (0..built.len()).flat_map(|p| (0..ics.len()).map(move |i| (p, i))).collect();
    let rows: Vec<RunRow> = tasks
        .par_iter()
        .map(|&(p, i)| RunRow {
            policy: built[p].name,
            index: i,
            outcome: run_single(exp, &built[p], &ics[i], opts).map_err(|e| e.to_string()),
        })
        .collect();
    let summaries = exp.config.policies.iter().map(|p| summarize(*p, &rows)).collect();
    Ok(EnsembleReport { initial_conditions: ics, summaries, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub protocol: String,
    pub contraction: ContractionReport,
    /// `(γ̃(ρs)/γ̃(s)` at small `s`, `ρ²)` for the threshold gain.
    pub small_signal: Option<(f64, f64)>,
    pub iss: Option<IssReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.contraction.passed() && self.iss.as_ref().is_none_or(|r| r.passed())
    }
}

/// Protocol contraction, ISS inequality and small-signal gain checks. A
/// protocol without a certificate is checked against `W = |e|` with the
/// try-once-discard factor, which round-robin is expected to fail.
pub fn run_verify(exp: &Experiment) -> VerifyReport {
    let v = &exp.config.verify;
    let cert: Arc<dyn ProtocolCertificate> = exp.protocol.certificate.clone().unwrap_or_else(|| {
        let l = exp.protocol.nodes() as f64;
        Arc::new(EuclideanCertificate { rho: ((l - 1.0) / l).sqrt() })
    });
    let contraction = verify_ugas_contraction(&exp.protocol, cert.as_ref(), v.protocol_samples, v.radius, v.seed);
    let small_signal = exp.threshold_policy().ok().map(|p| {
        let rho = cert.rho();
        let s = 1e-6;
        (p.gamma_tilde.value(rho * s) / p.gamma_tilde.value(s), rho * rho)
    });
    let iss = (exp.config.system == SystemName::JetEngine).then(|| {
        let gamma = jet_iss_gain().scaled(v.iss_gain_scale);
        check_iss_inequality(&exp.ncs, exp.lyapunov.as_ref(), &jet_iss_decay(), &gamma, v.iss_samples, v.radius, v.seed)
    });
    VerifyReport { protocol: exp.protocol.schedule.name().into(), contraction, small_signal, iss }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Transmission log as CSV: `t,node,e1_abs,…,el_abs,interval`.
pub fn transmissions_csv(log: &[Transmission], nodes: usize) -> String {
    let mut out = String::from("t,node,");
    for i in 1..=nodes {
        let _ = write!(out, "e{i}_abs,");
    }
    out.push_str("interval\n");
    for tr in log {
        let _ = write!(out, "{},{},", tr.t, tr.node);
        for e in &tr.e_abs {
            let _ = write!(out, "{e},");
        }
        let _ = writeln!(out, "{}", tr.interval);
    }
    out
}

/// `policy,mean_interval,min_dwell,runs,violations`.
pub fn summary_csv(summaries: &[PolicySummary]) -> String {
    let mut out = String::from("policy,mean_interval,min_dwell,runs,violations\n");
    for s in summaries {
        let _ = writeln!(out, "{},{},{},{},{}", s.policy, opt(s.mean_interval), opt(s.min_dwell), s.runs, s.violations);
    }
    out
}

/// One row per ensemble run.
pub fn runs_csv(report: &EnsembleReport) -> String {
    let dim = report.initial_conditions.first().map_or(0, Vec::len);
    let mut out = String::from("policy,run,");
    for i in 1..=dim {
        let _ = write!(out, "x{i}_0,");
    }
    out.push_str("status,jumps,mean_interval,min_dwell,violations,final_t,final_x_norm,converged\n");
    for row in &report.rows {
        let _ = write!(out, "{},{},", row.policy, row.index);
        for v in &report.initial_conditions[row.index] {
            let _ = write!(out, "{v},");
        }
        match &row.outcome {
            Ok(r) => {
                let status = match r.termination {
                    Termination::Horizon => "horizon",
                    Termination::MaxJumps => "max_jumps",
                    Termination::Stopped => "certified",
                };
                let _ = writeln!(
                    out,
                    "{status},{},{},{},{},{},{},{}",
                    r.jumps,
                    opt(r.mean_interval),
                    opt(r.monitor.dwell.as_ref().map(|d| d.min)),
                    r.monitor.violation_count(),
                    r.final_t,
                    r.monitor.final_x_norm,
                    r.monitor.converged
                );
            }
            Err(_) => {
                let _ = writeln!(out, "aborted,,,,,,,");
            }
        }
    }
    out
}

/// Plain-text monitor report of one run.
pub fn run_report_text(r: &RunRecord) -> String {
    let m = &r.monitor;
    let mut out = String::new();
    let _ = writeln!(out, "policy              {}", r.policy);
    let _ = writeln!(out, "x0                  {:?}", r.x0);
    let _ = writeln!(out, "termination         {:?}", r.termination);
    let _ = writeln!(out, "final_t             {}", r.final_t);
    let _ = writeln!(out, "transmissions       {}", r.jumps);
    let _ = writeln!(out, "mean_interval       {}", opt(r.mean_interval));
    let _ = writeln!(out, "flow_violations     {}", m.flow_violations.count);
    let _ = writeln!(out, "jump_violations     {}", m.jump_violations.count);
    let _ = writeln!(out, "guard_violations    {}", m.flow_guard_violations.count);
    let _ = writeln!(out, "membership_viol.    {}", m.membership_violations.count);
    let _ = writeln!(out, "final_x_norm        {}", m.final_x_norm);
    let _ = writeln!(out, "converged           {}", m.converged);
    if let Some(t) = m.certified_at {
        let _ = writeln!(out, "certified_at        {t}");
    }
    if let Some(d) = &m.dwell {
        let _ = writeln!(out, "dwell min/mean/max  {} / {} / {}", d.min, d.mean, d.max);
        let _ = writeln!(out, "dwell histogram");
        if d.zero > 0 {
            let _ = writeln!(out, "  0                       {}", d.zero);
        }
        for b in &d.histogram {
            let _ = writeln!(out, "  [{:e}, {:e})  {}", b.lower, b.upper, b.count);
        }
    }
    out
}

/// Plain-text table of ensemble summaries.
pub fn ensemble_report_text(report: &EnsembleReport) -> String {
    let mut out = format!(
        "{:<16}{:>6}{:>16}{:>16}{:>14}{:>12}{:>11}{:>9}{:>10}\n",
        "policy", "runs", "mean_interval", "pooled_mean", "min_dwell", "violations", "converged", "aborted", "no_jumps"
    );
    for s in &report.summaries {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(
            out,
            "{:<16}{:>6}{:>16}{:>16}{:>14}{:>12}{:>11}{:>9}{:>10}",
            s.policy.as_str(),
            s.runs,
            f(s.mean_interval),
            f(s.pooled_mean),
            f(s.min_dwell),
            s.violations,
            format!("{}/{}", s.converged, s.completed),
            s.aborted.len(),
            s.no_jump_runs.len()
        );
    }
    for s in &report.summaries {
        for (i, msg) in &s.aborted {
            let _ = writeln!(out, "aborted {} run {i}: {msg}", s.policy);
        }
    }
    out
}

pub fn verify_report_text(r: &VerifyReport) -> String {
    let mut out = String::new();
    let c = &r.contraction;
    let _ = writeln!(out, "protocol            {}", r.protocol);
    let _ = writeln!(out, "contraction samples {}", c.samples);
    let _ = writeln!(out, "rho                 {}", c.rho);
    let _ = writeln!(out, "worst ratio         {}", c.worst_ratio);
    let _ = writeln!(out, "contraction viol.   {}", c.violations.len());
    if let Some((ratio, rho2)) = r.small_signal {
        let _ = writeln!(out, "small-signal ratio  {ratio} (rho^2 = {rho2})");
    }
    if let Some(iss) = &r.iss {
        let _ = writeln!(out, "iss samples         {}", iss.samples);
        let _ = writeln!(out, "iss worst slack     {}", iss.worst_slack);
        let _ = writeln!(out, "iss violations      {}", iss.violations.len());
    }
    out
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, ExperimentError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Write transmission logs and reports of single runs, and the summary,
/// per-run table and report of an ensemble, into `dir`.
pub fn export_outputs(
    dir: &Path,
    runs: &[RunRecord],
    ensemble: Option<&EnsembleReport>,
    nodes: usize,
) -> Result<Vec<PathBuf>, ExperimentError> {
    if runs.is_empty() && ensemble.is_none() {
        return Err(config_err("nothing to export"));
    }
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.into(), source })?;
    let mut written = Vec::new();
    for r in runs {
        written.push(write_file(dir, &format!("transmissions_{}.csv", r.policy), &transmissions_csv(&r.transmissions, nodes))?);
        written.push(write_file(dir, &format!("monitor_{}.txt", r.policy), &run_report_text(r))?);
    }
    if let Some(e) = ensemble {
        written.push(write_file(dir, "summary.csv", &summary_csv(&e.summaries))?);
        written.push(write_file(dir, "runs.csv", &runs_csv(e))?);
        written.push(write_file(dir, "monitor.txt", &ensemble_report_text(e))?);
    }
    Ok(written)
}

pub fn write_verify_report(dir: &Path, r: &VerifyReport) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.into(), source })?;
    write_file(dir, "verify.txt", &verify_report_text(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transmission_row_format() {
        let log = vec![Transmission { t: 0.2, node: 2, e_abs: vec![0.1, 0.3], interval: 0.2 }];
        assert_eq!(transmissions_csv(&log, 2), "t,node,e1_abs,e2_abs,interval\n0.2,2,0.1,0.3,0.2\n");
    }

    #[test]
    fn empty_violations_print_zero() {
        let s = PolicySummary {
            policy: PolicyName::Periodic,
            mean_interval: Some(0.01),
            pooled_mean: Some(0.01),
            min_dwell: Some(0.01),
            runs: 3,
            no_jump_runs: vec![],
            aborted: vec![],
            violations: 0,
            converged: 3,
            completed: 3,
        };
        assert_eq!(summary_csv(&[s]), "policy,mean_interval,min_dwell,runs,violations\nperiodic,0.01,0.01,3,0\n");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("system = \"jet_engine\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("system = \"nope\"\n").is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyName::ALL {
            assert_eq!(PolicyName::parse(p.as_str()), Some(p));
        }
    }

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::from_toml("system = \"jet_engine\"\npolicies = [\"threshold\"]\n").unwrap();
        assert_eq!(c.horizon, 200.0);
        assert_eq!(c.ensemble.seed, 42);
        assert_eq!(c.protocol, "tod");
        let exp = Experiment::new(c).unwrap();
        assert!(exp.build(PolicyName::Threshold).is_ok());
        assert!(exp.build(PolicyName::Clock).is_err());
    }

    #[test]
    fn zero_initial_state_needs_no_transmission() {
        let mut c = ExperimentConfig::from_toml("system = \"jet_engine\"\nhorizon = 1.0\n").unwrap();
        c.initial.x = Some(vec![0.0, 0.0]);
        let exp = Experiment::new(c).unwrap();
        let built = exp.build(PolicyName::Threshold).unwrap();
        let r = run_single(&exp, &built, &[0.0, 0.0], RunOptions { keep_log: true, ..Default::default() }).unwrap();
        assert_eq!(r.jumps, 0);
        assert_eq!(r.monitor.final_x_norm, 0.0);
        assert!(r.monitor.passed());
    }
}
