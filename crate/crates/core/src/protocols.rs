//! Scheduling protocols `e⁺ = h_e(κ, e)` and their contraction certificates.
//!
//! Exactly one node transmits per jump and its error is reset to zero; every
//! other component of `e` is copied unchanged.

use std::sync::Arc;

use serde::Serialize;

use crate::ncs::{ModelError, NodePartition};
use crate::sampling::{norm, seeded_rng, uniform_in_ball};
use rand::Rng;

/// Node selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Largest `|e_i|` transmits; ties go to the lowest index.
    TryOnceDiscard,
    /// Node `κ mod l` transmits.
    RoundRobin,
}

impl Schedule {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tod" => Some(Self::TryOnceDiscard),
            "rr" => Some(Self::RoundRobin),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TryOnceDiscard => "tod",
            Self::RoundRobin => "rr",
        }
    }
}

/// Node granted access by try-once-discard.
pub fn tod_select(e: &[f64], partition: &NodePartition) -> usize {
    let mut best = 0;
    let mut best_sq = f64::NEG_INFINITY;
    for (i, r) in partition.ranges().iter().enumerate() {
        let sq: f64 = e[r.clone()].iter().map(|v| v * v).sum();
        if sq > best_sq {
            best = i;
            best_sq = sq;
        }
    }
    best
}

pub fn rr_select(kappa: u64, partition: &NodePartition) -> usize {
    (kappa % partition.nodes() as u64) as usize
}

fn zero_node(e: &[f64], partition: &NodePartition, node: usize) -> Vec<f64> {
    let mut out = e.to_vec();
    out[partition.range(node)].fill(0.0);
    out
}

/// Try-once-discard jump. `kappa` does not influence the choice.
pub fn tod_jump(_kappa: u64, e: &[f64], partition: &NodePartition) -> Result<Vec<f64>, ModelError> {
    partition.check(e)?;
    Ok(zero_node(e, partition, tod_select(e, partition)))
}

/// Round-robin jump.
pub fn rr_jump(kappa: u64, e: &[f64], partition: &NodePartition) -> Result<Vec<f64>, ModelError> {
    partition.check(e)?;
    Ok(zero_node(e, partition, rr_select(kappa, partition)))
}

/// Protocol Lyapunov function `W(κ, e)` with contraction factor `ρ`.
pub trait ProtocolCertificate: Send + Sync {
    fn value(&self, kappa: u64, e: &[f64]) -> f64;
    fn rho(&self) -> f64;

    /// Rate of `W(κ, e(t))` when `ė = de`, if known in closed form.
    fn rate(&self, _kappa: u64, _e: &[f64], _de: &[f64]) -> Option<f64> {
        None
    }
}

/// `W(κ, e) = |e|` with a fixed `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EuclideanCertificate {
    pub rho: f64,
}

impl ProtocolCertificate for EuclideanCertificate {
    fn value(&self, _kappa: u64, e: &[f64]) -> f64 {
        norm(e)
    }
    fn rho(&self) -> f64 {
        self.rho
    }
    /// `e·ė / |e|`, taken as zero at `e = 0`.
    fn rate(&self, _kappa: u64, e: &[f64], de: &[f64]) -> Option<f64> {
        let n = norm(e);
        if n == 0.0 {
            return Some(0.0);
        }
        Some(e.iter().zip(de).map(|(a, b)| a * b).sum::<f64>() / n)
    }
}

/// TOD certificate for `l` nodes: `W = |e|`, `ρ = √((l − 1)/l)`.
pub fn tod_certificate(l: usize) -> EuclideanCertificate {
    assert!(l >= 1, "at least one node");
    EuclideanCertificate { rho: ((l - 1) as f64 / l as f64).sqrt() }
}

/// Scheduling rule bundled with an optional certificate.
///
/// Round-robin ships without a certificate; callers that need one supply
/// their own `(W, ρ)`.
#[derive(Clone)]
pub struct Protocol {
    pub schedule: Schedule,
    pub partition: NodePartition,
    pub certificate: Option<Arc<dyn ProtocolCertificate>>,
}

impl std::fmt::Debug for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Protocol")
            .field("schedule", &self.schedule)
            .field("nodes", &self.partition.nodes())
            .field("rho", &self.certificate.as_ref().map(|c| c.rho()))
            .finish()
    }
}

impl Protocol {
    pub fn tod(partition: NodePartition) -> Self {
        let cert = tod_certificate(partition.nodes());
        Self { schedule: Schedule::TryOnceDiscard, partition, certificate: Some(Arc::new(cert)) }
    }

    pub fn round_robin(partition: NodePartition) -> Self {
        Self { schedule: Schedule::RoundRobin, partition, certificate: None }
    }

    pub fn with_certificate(mut self, cert: Arc<dyn ProtocolCertificate>) -> Self {
        self.certificate = Some(cert);
        self
    }

    pub fn nodes(&self) -> usize {
        self.partition.nodes()
    }

    pub fn select(&self, kappa: u64, e: &[f64]) -> usize {
        match self.schedule {
            Schedule::TryOnceDiscard => tod_select(e, &self.partition),
            Schedule::RoundRobin => rr_select(kappa, &self.partition),
        }
    }

    pub fn jump(&self, kappa: u64, e: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.partition.check(e)?;
        Ok(zero_node(e, &self.partition, self.select(kappa, e)))
    }

    /// Jump without the dimension check, for the hot simulation path.
    pub(crate) fn jump_unchecked(&self, kappa: u64, e: &[f64]) -> Vec<f64> {
        zero_node(e, &self.partition, self.select(kappa, e))
    }

    /// Closed-form rate of [`Self::w`] along `ė = de`, if available.
    pub fn w_rate(&self, kappa: u64, e: &[f64], de: &[f64]) -> Option<f64> {
        match &self.certificate {
            Some(c) => c.rate(kappa, e, de),
            None => EuclideanCertificate { rho: 1.0 }.rate(kappa, e, de),
        }
    }

    /// Certificate value, or `|e|` when none is attached.
    pub fn w(&self, kappa: u64, e: &[f64]) -> f64 {
        match &self.certificate {
            Some(c) => c.value(kappa, e),
            None => norm(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionSample {
    pub kappa: u64,
    pub e: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub samples: usize,
    pub rho: f64,
    pub worst_ratio: f64,
    pub violations: Vec<ContractionSample>,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Ratio `W(κ + 1, h_e(κ, e)) / W(κ, e)`; `None` when `W(κ, e) = 0`.
pub fn contraction_ratio(
    protocol: &Protocol,
    cert: &dyn ProtocolCertificate,
    kappa: u64,
    e: &[f64],
) -> Result<Option<f64>, ModelError> {
    let before = cert.value(kappa, e);
    if before == 0.0 {
        return Ok(None);
    }
    let after = cert.value(kappa + 1, &protocol.jump(kappa, e)?);
    Ok(Some(after / before))
}

/// Sample `e` uniformly in the `radius` ball and `κ` uniformly in
/// `{0, …, 2l − 1}`; flag every ratio above `ρ + 1e-12`.
pub fn verify_ugas_contraction(
    protocol: &Protocol,
    cert: &dyn ProtocolCertificate,
    samples: usize,
    radius: f64,
    seed: u64,
) -> ContractionReport {
    let mut rng = seeded_rng(seed);
    let dim = protocol.partition.dim();
    let kappa_range = 2 * protocol.nodes() as u64;
    let rho = cert.rho();
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for _ in 0..samples {
        let e = uniform_in_ball(&mut rng, dim, radius);
        let kappa = rng.random_range(0..kappa_range);
        if let Some(ratio) = contraction_ratio(protocol, cert, kappa, &e).expect("sampled e matches partition") {
            worst = worst.max(ratio);
            if ratio > rho + 1e-12 {
                violations.push(ContractionSample { kappa, e, ratio });
            }
        }
    }
    ContractionReport { samples, rho, worst_ratio: worst, violations }
}
