use ncs_core::hybrid::{
    integrate_flow, simulate_hybrid, HybridState, HybridSystem, IntegratorConfig, Recording,
};
use ncs_core::ncs::{jet_engine_system, NcsSystem};
use ncs_core::triggers::{ClosedLoop, SelfTriggeredLoop};

/// Jet closed loop with `e` frozen at zero and no jumps.
struct FrozenError(NcsSystem);

impl HybridSystem for FrozenError {
    fn dim(&self) -> usize {
        2
    }
    fn flow(&self, _: u64, q: &[f64], dq: &mut [f64]) {
        let mut de = [0.0; 2];
        self.0.flow_into(q, &[0.0, 0.0], dq, &mut de);
    }
    fn guard(&self, _: u64, _: &[f64]) -> f64 {
        -1.0
    }
    fn jump(&self, s: &HybridState) -> Result<HybridState, String> {
        Ok(s.clone())
    }
}

fn rk4(sys: &dyn HybridSystem, y0: &[f64], t_end: f64, h: f64) -> Vec<f64> {
    let n = y0.len();
    let mut y = y0.to_vec();
    let f = |y: &[f64]| {
        let mut d = vec![0.0; n];
        sys.flow(0, y, &mut d);
        d
    };
    let steps = (t_end / h).round() as usize;
    for _ in 0..steps {
        let k1 = f(&y);
        let y2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
        let k2 = f(&y2);
        let y3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
        let k3 = f(&y3);
        let y4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
        let k4 = f(&y4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

#[test]
fn jet_flow_matches_fine_rk4_reference() {
    let sys = FrozenError(jet_engine_system());
    let cfg = IntegratorConfig::default().with_horizon(1.0);
    let arc = integrate_flow(&sys, 0.0, &HybridState::new(vec![0.95, -0.14], 0), &cfg).unwrap();
    assert!(!arc.hit);
    let end = arc.end();
    assert_eq!(end.t, 1.0);
    let reference = rk4(&sys, &[0.95, -0.14], 1.0, 1e-6);
    for (a, b) in end.values.iter().zip(&reference) {
        assert!((a - b).abs() <= 10.0 * cfg.rel_tol * b.abs().max(1.0), "{:?} vs {reference:?}", end.values);
    }
}

fn first_jump(loop_: &ClosedLoop, cfg: &IntegratorConfig) -> (f64, Vec<f64>) {
    let q0 = loop_.initial_state(&[0.95, -0.14], &[0.0, 0.0]).unwrap();
    let arc = integrate_flow(loop_, 0.0, &q0, cfg).unwrap();
    assert!(arc.hit);
    let end = arc.end();
    (end.t, end.values.clone())
}

#[test]
fn halving_tolerances_barely_moves_first_jump() {
    let loop_ = ClosedLoop::jet_threshold();
    let coarse = IntegratorConfig::default().with_horizon(1.0);
    let fine = IntegratorConfig { rel_tol: coarse.rel_tol / 2.0, abs_tol: coarse.abs_tol / 2.0, ..coarse.clone() };
    let (tc, qc) = first_jump(&loop_, &coarse);
    let (tf, qf) = first_jump(&loop_, &fine);
    assert!((tc - tf).abs() < 10.0 * coarse.rel_tol.max(coarse.event_time_tol), "{tc} vs {tf}");
    // x and e; η has scale 5000 and is compared relatively.
    for i in 0..4 {
        assert!((qc[i] - qf[i]).abs() < 10.0 * coarse.rel_tol, "component {i}: {} vs {}", qc[i], qf[i]);
    }
    assert!((qc[4] - qf[4]).abs() < 10.0 * coarse.rel_tol * qc[4].abs());
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let loop_ = ClosedLoop::jet_threshold();
    let q0 = loop_.initial_state(&[0.4, -0.3], &[0.0, 0.0]).unwrap();
    let cfg = IntegratorConfig::default().with_horizon(2.0);
    let a = simulate_hybrid(&loop_, &q0, &cfg).unwrap();
    let b = simulate_hybrid(&loop_, &q0, &cfg).unwrap();
    assert_eq!(a, b);
    let st = SelfTriggeredLoop::jet();
    let q0 = st.initial_state(&[0.4, -0.3], &[0.0, 0.0]).unwrap();
    let cfg = IntegratorConfig { recording: Recording::Endpoints, ..IntegratorConfig::default().with_horizon(0.2) };
    assert_eq!(simulate_hybrid(&st, &q0, &cfg).unwrap(), simulate_hybrid(&st, &q0, &cfg).unwrap());
}

#[test]
fn hybrid_time_domain_and_localization() {
    let loop_ = ClosedLoop::jet_threshold();
    let cfg = IntegratorConfig::default().with_horizon(3.0);
    for x0 in [[0.95, -0.14], [-0.5, 0.6], [0.1, 0.05]] {
        let q0 = loop_.initial_state(&x0, &[0.0, 0.0]).unwrap();
        let traj = simulate_hybrid(&loop_, &q0, &cfg).unwrap();
        traj.check_time_domain().unwrap();
        assert!(!traj.jumps.is_empty());
        for j in traj.jumps.iter().filter(|j| j.after_flow) {
            // The guard changes by at most |dg/dt| · event_time_tol across the
            // localization bracket; estimate the rate along the flow.
            let q = &j.pre.values;
            let mut dq = vec![0.0; q.len()];
            loop_.flow(j.pre.counter, q, &mut dq);
            let h = 1e-7;
            let back: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a - h * b).collect();
            let rate = (j.guard - loop_.guard(j.pre.counter, &back)).abs() / h;
            let tol = rate * cfg.event_time_tol * 2.0 + 1e-12 * q[4].abs().max(1.0);
            assert!(j.guard >= 0.0 && j.guard <= tol, "guard {} above {tol} at t = {}", j.guard, j.at.t);
        }
    }
}

#[test]
fn post_jump_state_starts_next_segment() {
    let loop_ = ClosedLoop::jet_threshold();
    let q0 = loop_.initial_state(&[0.95, -0.14], &[0.0, 0.0]).unwrap();
    let traj = simulate_hybrid(&loop_, &q0, &IntegratorConfig::default().with_horizon(1.0)).unwrap();
    assert_eq!(traj.segments.len(), traj.jumps.len() + 1);
    for (k, j) in traj.jumps.iter().enumerate() {
        assert_eq!(traj.segments[k].end().values, j.pre.values);
        assert_eq!(traj.segments[k + 1].samples[0].values, j.post.values);
        assert_eq!(traj.segments[k + 1].start.j, j.at.j + 1);
    }
}
