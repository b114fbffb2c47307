//! Networked control system composition.
//!
//! Plant, controller and in-network holds are combined into the closed-loop
//! flow of the plant/controller state `x = (x_P, x_C)` and the
//! network-induced error `e = (e_xP, e_u)`, with `x̂_P = x_P + e_xP` and
//! `û = g_C(x_C, x̂_P) + e_u`.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid node partition: {0}")]
    InvalidPartition(String),
}

/// Plant dynamics `ẋ_P = f_P(x_P, u)`.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn dynamics(&self, x: &[f64], u: &[f64], dx: &mut [f64]);
}

/// Dynamic state-feedback controller `ẋ_C = f_C(x_C, x̂_P)`,
/// `u = g_C(x_C, x̂_P)`.
pub trait Controller: Send + Sync {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn dynamics(&self, xc: &[f64], xp_hat: &[f64], dxc: &mut [f64]);
    fn output(&self, xc: &[f64], xp_hat: &[f64], u: &mut [f64]);

    /// Row-major Jacobians `(∂g_C/∂x_C, ∂g_C/∂x̂_P)`, sized `n_u × n_C` and
    /// `n_u × n_P`. Defaults to central differences.
    fn output_jacobians(&self, xc: &[f64], xp_hat: &[f64]) -> (Vec<f64>, Vec<f64>) {
        numeric_output_jacobians(self, xc, xp_hat)
    }
}

/// Central-difference Jacobians of `g_C` with step `1e-6 · (1 + |arg|)`.
pub fn numeric_output_jacobians<C: Controller + ?Sized>(
    ctrl: &C,
    xc: &[f64],
    xp_hat: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nu = ctrl.output_dim();
    let column = |arg: &[f64], which: usize| -> Vec<f64> {
        let n = arg.len();
        let mut jac = vec![0.0; nu * n];
        let mut up = vec![0.0; nu];
        let mut down = vec![0.0; nu];
        let mut shifted = arg.to_vec();
        for k in 0..n {
            let h = 1e-6 * (1.0 + arg[k].abs());
            shifted[k] = arg[k] + h;
            if which == 0 {
                ctrl.output(&shifted, xp_hat, &mut up);
            } else {
                ctrl.output(xc, &shifted, &mut up);
            }
            shifted[k] = arg[k] - h;
            if which == 0 {
                ctrl.output(&shifted, xp_hat, &mut down);
            } else {
                ctrl.output(xc, &shifted, &mut down);
            }
            shifted[k] = arg[k];
            for r in 0..nu {
                jac[r * n + k] = (up[r] - down[r]) / (2.0 * h);
            }
        }
        jac
    };
    (column(xc, 0), column(xp_hat, 1))
}

/// In-network generators of `x̂_P` and `û` between transmissions.
pub trait Hold: Send + Sync {
    fn plant_hold(&self, xp: &[f64], xc: &[f64], xp_hat: &[f64], u_hat: &[f64], out: &mut [f64]);
    fn input_hold(&self, xp: &[f64], xc: &[f64], xp_hat: &[f64], u_hat: &[f64], out: &mut [f64]);
}

/// Held values stay constant between transmissions.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOrderHold;

impl Hold for ZeroOrderHold {
    fn plant_hold(&self, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn input_hold(&self, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Index ranges of the `l` nodes inside the error vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePartition {
    ranges: Vec<Range<usize>>,
    dim: usize,
}

impl NodePartition {
    /// Build from contiguous node sizes, in node order.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, ModelError> {
        if sizes.is_empty() {
            return Err(ModelError::InvalidPartition("at least one node is required".into()));
        }
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if s == 0 {
                return Err(ModelError::InvalidPartition(format!("node {i} is empty")));
            }
            ranges.push(start..start + s);
            start += s;
        }
        Ok(Self { ranges, dim: start })
    }

    /// Build from explicit ranges; they must tile `[0, n_e)` in order.
    pub fn from_ranges(ranges: Vec<Range<usize>>) -> Result<Self, ModelError> {
        let mut expected = 0;
        for (i, r) in ranges.iter().enumerate() {
            if r.start != expected || r.end <= r.start {
                return Err(ModelError::InvalidPartition(format!(
                    "node {i} range {r:?} does not continue at {expected}"
                )));
            }
            expected = r.end;
        }
        if ranges.is_empty() {
            return Err(ModelError::InvalidPartition("at least one node is required".into()));
        }
        Ok(Self { ranges, dim: expected })
    }

    /// One scalar node per error component.
    pub fn singletons(n: usize) -> Result<Self, ModelError> {
        Self::from_sizes(&vec![1; n])
    }

    pub fn nodes(&self) -> usize {
        self.ranges.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn range(&self, node: usize) -> Range<usize> {
        self.ranges[node].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// Euclidean norm of each node's sub-vector.
    pub fn node_norms(&self, e: &[f64]) -> Vec<f64> {
        self.ranges.iter().map(|r| e[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn check(&self, e: &[f64]) -> Result<(), ModelError> {
        if e.len() != self.dim {
            return Err(ModelError::DimensionMismatch { what: "error vector", expected: self.dim, got: e.len() });
        }
        Ok(())
    }
}

/// Whether the control input travels through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActuatorLink {
    /// Controller wired to the actuator: `e_u` is empty.
    Collocated,
    /// Input sent over the network: `e_u` has `n_u` components.
    Networked,
}

/// Plant, controller, holds and node partition of one NCS.
#[derive(Clone)]
pub struct NcsSystem {
    pub plant: Arc<dyn Plant>,
    pub controller: Arc<dyn Controller>,
    pub hold: Arc<dyn Hold>,
    pub actuator: ActuatorLink,
    pub partition: NodePartition,
}

impl std::fmt::Debug for NcsSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NcsSystem")
            .field("n_p", &self.plant.state_dim())
            .field("n_c", &self.controller.state_dim())
            .field("n_u", &self.plant.input_dim())
            .field("actuator", &self.actuator)
            .field("partition", &self.partition)
            .finish()
    }
}

impl NcsSystem {
    pub fn new(
        plant: Arc<dyn Plant>,
        controller: Arc<dyn Controller>,
        hold: Arc<dyn Hold>,
        actuator: ActuatorLink,
        partition: NodePartition,
    ) -> Result<Self, ModelError> {
        let sys = Self { plant, controller, hold, actuator, partition };
        if sys.controller.output_dim() != sys.plant.input_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "controller output",
                expected: sys.plant.input_dim(),
                got: sys.controller.output_dim(),
            });
        }
        if sys.partition.dim() != sys.error_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "node partition",
                expected: sys.error_dim(),
                got: sys.partition.dim(),
            });
        }
        Ok(sys)
    }

    pub fn plant_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn controller_dim(&self) -> usize {
        self.controller.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    /// `n_x = n_P + n_C`.
    pub fn state_dim(&self) -> usize {
        self.plant_dim() + self.controller_dim()
    }

    /// `n_P + n_u` when the input is networked, `n_P` otherwise.
    pub fn error_dim(&self) -> usize {
        match self.actuator {
            ActuatorLink::Collocated => self.plant_dim(),
            ActuatorLink::Networked => self.plant_dim() + self.input_dim(),
        }
    }

    /// Closed-loop `(ẋ, ė)` with dimension checks.
    pub fn closed_loop_flow(&self, x: &[f64], e: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if x.len() != self.state_dim() {
            return Err(ModelError::DimensionMismatch { what: "state", expected: self.state_dim(), got: x.len() });
        }
        self.partition.check(e)?;
        let mut dx = vec![0.0; x.len()];
        let mut de = vec![0.0; e.len()];
        self.flow_into(x, e, &mut dx, &mut de);
        Ok((dx, de))
    }

    /// Non-allocating-output variant of [`Self::closed_loop_flow`];
    /// dimensions are the caller's responsibility.
    pub fn flow_into(&self, x: &[f64], e: &[f64], dx: &mut [f64], de: &mut [f64]) {
        let np = self.plant_dim();
        let nu = self.input_dim();
        let (xp, xc) = x.split_at(np);
        let (e_x, e_u) = e.split_at(np);

        // Scratch for x̂_P, û and f̂_P; on the stack for small systems.
        let need = 2 * np + nu;
        let mut stack = [0.0f64; 32];
        let mut heap;
        let scratch: &mut [f64] = if need <= stack.len() {
            &mut stack[..need]
        } else {
            heap = vec![0.0; need];
            &mut heap
        };
        let (xp_hat, rest) = scratch.split_at_mut(np);
        let (u_hat, fp_hat) = rest.split_at_mut(nu);
        for ((h, a), b) in xp_hat.iter_mut().zip(xp).zip(e_x) {
            *h = a + b;
        }

        self.controller.output(xc, xp_hat, u_hat);
        if self.actuator == ActuatorLink::Networked {
            for (u, eu) in u_hat.iter_mut().zip(e_u) {
                *u += eu;
            }
        }

        let (dxp, dxc) = dx.split_at_mut(np);
        self.plant.dynamics(xp, u_hat, dxp);
        self.controller.dynamics(xc, xp_hat, dxc);

        let (de_x, de_u) = de.split_at_mut(np);
        self.hold.plant_hold(xp, xc, xp_hat, u_hat, fp_hat);
        for i in 0..np {
            de_x[i] = fp_hat[i] - dxp[i];
        }

        if self.actuator == ActuatorLink::Networked {
            let nc = xc.len();
            self.hold.input_hold(xp, xc, xp_hat, u_hat, de_u);
            let (dg_dxc, dg_dxp) = self.controller.output_jacobians(xc, xp_hat);
            for r in 0..nu {
                let mut chain = 0.0;
                for k in 0..nc {
                    chain += dg_dxc[r * nc + k] * dxc[k];
                }
                for k in 0..np {
                    chain += dg_dxp[r * np + k] * fp_hat[k];
                }
                de_u[r] -= chain;
            }
        }
    }
}

/// Jet-engine compressor surge model `ẋ₁ = −x₂ − 1.5x₁² − 0.5x₁³`, `ẋ₂ = u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct JetEnginePlant;

impl Plant for JetEnginePlant {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let x1 = x[0];
        dx[0] = -x[1] - 1.5 * x1 * x1 - 0.5 * x1 * x1 * x1;
        dx[1] = u[0];
    }
}

/// Static feedback `u = 4x₁ − 4x₂ − 4.5x₁² − 1.5x₁³` evaluated on `x̂`.
#[derive(Debug, Clone, Copy, Default)]
pub struct JetEngineController;

impl Controller for JetEngineController {
    fn state_dim(&self) -> usize {
        0
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, _: &[f64], _: &[f64], _: &mut [f64]) {}
    fn output(&self, _xc: &[f64], xh: &[f64], u: &mut [f64]) {
        let x1 = xh[0];
        u[0] = 4.0 * x1 - 4.0 * xh[1] - 4.5 * x1 * x1 - 1.5 * x1 * x1 * x1;
    }
    fn output_jacobians(&self, _xc: &[f64], xh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x1 = xh[0];
        (Vec::new(), vec![4.0 - 9.0 * x1 - 4.5 * x1 * x1, -4.0])
    }
}

/// Jet-engine loop: two sensor nodes (`x₁`, `x₂`), zero-order holds,
/// controller wired to the actuator.
pub fn jet_engine_system() -> NcsSystem {
    NcsSystem::new(
        Arc::new(JetEnginePlant),
        Arc::new(JetEngineController),
        Arc::new(ZeroOrderHold),
        ActuatorLink::Collocated,
        NodePartition::singletons(2).expect("two nodes"),
    )
    .expect("jet engine dimensions are consistent")
}

/// Scalar linear plant `ẋ = a·x + b·u`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLinearPlant {
    pub a: f64,
    pub b: f64,
}

impl Plant for ScalarLinearPlant {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        dx[0] = self.a * x[0] + self.b * u[0];
    }
}

/// Static linear feedback `u = −k·x̂`.
#[derive(Debug, Clone, Copy)]
pub struct StaticGain {
    pub k: f64,
}

impl Controller for StaticGain {
    fn state_dim(&self) -> usize {
        0
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn dynamics(&self, _: &[f64], _: &[f64], _: &mut [f64]) {}
    fn output(&self, _xc: &[f64], xh: &[f64], u: &mut [f64]) {
        u[0] = -self.k * xh[0];
    }
    fn output_jacobians(&self, _xc: &[f64], _xh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (Vec::new(), vec![-self.k])
    }
}

/// Scalar clock-policy fixture: `ẋ = x + u`, `u = −2x̂`, input sent over the
/// network. Nodes: sensor (`e_x`) and actuator (`e_u`), so
/// `ẋ = −x − 2e_x + e_u`, `ė_x = −ẋ`, `ė_u = 0`.
pub fn scalar_clock_fixture() -> NcsSystem {
    NcsSystem::new(
        Arc::new(ScalarLinearPlant { a: 1.0, b: 1.0 }),
        Arc::new(StaticGain { k: 2.0 }),
        Arc::new(ZeroOrderHold),
        ActuatorLink::Networked,
        NodePartition::singletons(2).expect("two nodes"),
    )
    .expect("fixture dimensions are consistent")
}
