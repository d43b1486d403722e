//! Receding-horizon optimal control problem for path following.
//!
//! The decision vector holds the jerk inputs `u_1 .. u_N` of all joints, the
//! path jerks `v_1 .. v_N` and one nonnegative slack per stage and bounded
//! error component. States are eliminated by condensing; Cartesian errors are
//! linearized about the rollout of the shifted previous plan.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bounds::BoundSet;
use crate::dynamics::{discretize_dynamics, Condensed, Discretization};
use crate::error::{Error, Result};
use crate::kinematics::{JointLimits, JointState, KinematicChain};
use crate::predictor::AdaptedHandoverGoal;
use crate::qp::{solve_qp, Qp, QpSettings, QpStatus};
use crate::refpath::{DecomposedError, ReferencePath};
use crate::so3::{exp_map, left_jacobian, rpy_from_rotation, rpy_rate_matrix};
use crate::sync::DesiredPathState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    pub horizon: usize,
    pub sample_time: f64,
    pub w_parallel_position: f64,
    pub w_parallel_orientation: f64,
    /// Weights on `(phi, dphi, ddphi)` deviations from the desired path state.
    pub w_path_state: [f64; 3],
    pub w_jerk: f64,
    pub w_path_jerk: f64,
    pub w_terminal_position: f64,
    pub w_terminal_orientation: f64,
    /// Small damping on joint velocities; keeps the redundant joint quiet.
    pub w_joint_velocity: f64,
    /// L1 penalty on violations of the error bounds.
    pub slack_weight: f64,
    pub sqp_iterations: usize,
    pub qp_tolerance: f64,
    pub qp_max_iterations: usize,
    pub path_velocity_max: f64,
    pub path_acceleration_max: f64,
    pub path_jerk_max: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            sample_time: 0.1,
            w_parallel_position: 100.0,
            w_parallel_orientation: 10.0,
            w_path_state: [30.0, 10.0, 1.0],
            w_jerk: 1e-3,
            w_path_jerk: 1e-3,
            w_terminal_position: 500.0,
            w_terminal_orientation: 50.0,
            w_joint_velocity: 0.0,
            slack_weight: 1e3,
            sqp_iterations: 1,
            qp_tolerance: 1e-9,
            qp_max_iterations: 100,
            path_velocity_max: 1.0,
            path_acceleration_max: 2.0,
            path_jerk_max: 20.0,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Validation { field: format!("ocp.{field}"), message: message.into() });
        if self.horizon < 2 {
            return bad("horizon", "must be at least 2");
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return bad("sample_time", "must be positive");
        }
        let weights = [
            ("w_parallel_position", self.w_parallel_position),
            ("w_parallel_orientation", self.w_parallel_orientation),
            ("w_path_state", self.w_path_state[0]),
            ("w_path_state", self.w_path_state[1]),
            ("w_path_state", self.w_path_state[2]),
            ("w_jerk", self.w_jerk),
            ("w_path_jerk", self.w_path_jerk),
            ("w_terminal_position", self.w_terminal_position),
            ("w_terminal_orientation", self.w_terminal_orientation),
            ("w_joint_velocity", self.w_joint_velocity),
            ("slack_weight", self.slack_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(name, "must be nonnegative");
            }
        }
        if self.w_jerk <= 0.0 || self.w_path_jerk <= 0.0 {
            return bad("w_jerk", "input weights must be positive");
        }
        if self.w_terminal_position <= self.w_terminal_orientation {
            return bad("w_terminal_position", "must exceed w_terminal_orientation");
        }
        if self.sqp_iterations == 0 {
            return bad("sqp_iterations", "must be at least 1");
        }
        if !(self.qp_tolerance > 0.0) || self.qp_max_iterations == 0 {
            return bad("qp_tolerance", "solver settings must be positive");
        }
        for (name, v) in [
            ("path_velocity_max", self.path_velocity_max),
            ("path_acceleration_max", self.path_acceleration_max),
            ("path_jerk_max", self.path_jerk_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        Ok(())
    }

    pub fn qp_settings(&self) -> QpSettings {
        QpSettings { tolerance: self.qp_tolerance, max_iterations: self.qp_max_iterations }
    }
}

/// Joint state, path state, the input currently applied and the warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerState {
    pub joints: JointState,
    /// `(phi, dphi, ddphi)`.
    pub path: Vector3<f64>,
    pub u: DVector<f64>,
    pub v: f64,
    /// Inputs `u_1 .. u_N` of the previous plan shifted by one stage.
    pub warm_u: Vec<DVector<f64>>,
    pub warm_v: Vec<f64>,
}

impl PlannerState {
    pub fn at_rest(q: DVector<f64>, phi: f64, horizon: usize) -> Self {
        let n = q.len();
        Self {
            joints: JointState::at_rest(q),
            path: Vector3::new(phi, 0.0, 0.0),
            u: DVector::zeros(n),
            v: 0.0,
            warm_u: vec![DVector::zeros(n); horizon],
            warm_v: vec![0.0; horizon],
        }
    }

    fn is_finite(&self) -> bool {
        let vecs = [&self.joints.q, &self.joints.dq, &self.joints.ddq, &self.u];
        vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.path.iter().all(|x| x.is_finite())
            && self.v.is_finite()
            && self.warm_u.iter().all(|u| u.iter().all(|x| x.is_finite()))
            && self.warm_v.iter().all(|x| x.is_finite())
    }
}

/// States over the horizon, stage 0 being the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub joints: Vec<JointState>,
    pub path: Vec<Vector3<f64>>,
}

/// Propagates `state` with inputs `u_1 .. u_N`, `v_1 .. v_N`.
pub fn rollout(cond: &Condensed, state: &PlannerState, u: &[DVector<f64>], v: &[f64]) -> Trajectory {
    let n = cond.horizon();
    let nj = state.joints.q.len();
    let mut joints: Vec<JointState> = (0..=n)
        .map(|_| JointState { q: DVector::zeros(nj), dq: DVector::zeros(nj), ddq: DVector::zeros(nj) })
        .collect();
    let mut inputs = vec![0.0; n + 1];
    for m in 0..nj {
        let x0 = Vector3::new(state.joints.q[m], state.joints.dq[m], state.joints.ddq[m]);
        inputs[0] = state.u[m];
        for j in 0..n {
            inputs[j + 1] = u[j][m];
        }
        for (k, js) in joints.iter_mut().enumerate() {
            let x = cond.state(k, &x0, &inputs);
            js.q[m] = x[0];
            js.dq[m] = x[1];
            js.ddq[m] = x[2];
        }
    }
    inputs[0] = state.v;
    inputs[1..].copy_from_slice(v);
    let path = (0..=n).map(|k| cond.state(k, &state.path, &inputs)).collect();
    Trajectory { joints, path }
}

/// Decomposed errors at one stage and their derivatives with respect to the
/// joint positions and the path parameter. Rows are `(perp1, perp2, parallel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization {
    pub position: DecomposedError,
    pub orientation: DecomposedError,
    pub d_position_dq: DMatrix<f64>,
    pub d_position_dphi: Vector3<f64>,
    pub d_orientation_dq: DMatrix<f64>,
    pub d_orientation_dphi: Vector3<f64>,
}

pub fn linearize_stage(chain: &KinematicChain, path: &ReferencePath, q: &[f64], phi: f64) -> Result<StageLinearization> {
    let (pose, jac) = chain.pose_and_jacobian(q)?;
    let seg = path.segment_at(phi);
    let (pi_p, pi_o) = path.eval(phi)?;

    let e = pose.position - pi_p;
    let basis = Matrix3::from_rows(&[seg.b_p1.transpose(), seg.b_p2.transpose(), seg.tangent.transpose()]);
    let pe = basis * e;
    let j_lin = jac.rows(0, 3);
    let d_position_dq = basis * j_lin;
    let d_position_dphi = -(basis * seg.tangent);

    let frame = seg.orientation_frame();
    let r_err = pose.rotation * exp_map(&pi_o).transpose();
    crate::so3::log_map(&r_err)?;
    let rpy = rpy_from_rotation(&(frame.transpose() * r_err * frame))?;
    let e_inv = rpy_rate_matrix(&rpy).try_inverse().ok_or(Error::GimbalLock { cos_pitch: 0.0 })?;
    let m = e_inv * frame.transpose();
    // Rows of `m` give (roll, pitch, yaw); reorder to (yaw, roll, pitch).
    let m = Matrix3::from_rows(&[m.row(2).into_owned(), m.row(0).into_owned(), m.row(1).into_owned()]);
    let d_orientation_dq = m * jac.rows(3, 3);
    let d_orientation_dphi = m * (-(r_err * left_jacobian(&pi_o) * seg.orientation_rate()));

    Ok(StageLinearization {
        position: DecomposedError { perp1: pe[0], perp2: pe[1], parallel: pe[2] },
        orientation: DecomposedError { perp1: rpy.yaw, perp2: rpy.roll, parallel: rpy.pitch },
        d_position_dq: DMatrix::from_iterator(3, q.len(), d_position_dq.iter().copied()),
        d_position_dphi,
        d_orientation_dq: DMatrix::from_iterator(3, q.len(), d_orientation_dq.iter().copied()),
        d_orientation_dphi,
    })
}

/// Index bookkeeping for the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    pub joints: usize,
}

impl Layout {
    pub fn n_inputs(&self) -> usize {
        self.horizon * (self.joints + 1)
    }

    pub fn n_vars(&self) -> usize {
        self.n_inputs() + 4 * self.horizon
    }

    /// Joint `m` jerk at stage `j` (1-based).
    pub fn u(&self, j: usize, m: usize) -> usize {
        (j - 1) * (self.joints + 1) + m
    }

    pub fn v(&self, j: usize) -> usize {
        (j - 1) * (self.joints + 1) + self.joints
    }

    /// Slack of bounded component `c` (`e_p1, e_p2, e_o1, e_o2`) at stage `k`.
    pub fn slack(&self, k: usize, c: usize) -> usize {
        self.n_inputs() + (k - 1) * 4 + c
    }

    pub fn pack(&self, u: &[DVector<f64>], v: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_vars());
        for j in 1..=self.horizon {
            for m in 0..self.joints {
                z[self.u(j, m)] = u[j - 1][m];
            }
            z[self.v(j)] = v[j - 1];
        }
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<f64>) {
        let u = (1..=self.horizon).map(|j| DVector::from_fn(self.joints, |m, _| z[self.u(j, m)])).collect();
        let v = (1..=self.horizon).map(|j| z[self.v(j)]).collect();
        (u, v)
    }
}

/// Affine function `c + a'z` of the decision vector.
#[derive(Debug, Clone)]
struct Affine {
    c: f64,
    a: DVector<f64>,
}

/// Quadratic `1/2 z'Hz + g'z + c`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
}

impl Quadratic {
    fn zeros(n: usize) -> Self {
        Self { hessian: DMatrix::zeros(n, n), gradient: DVector::zeros(n), constant: 0.0 }
    }

    /// Adds `w (c + a'z)^2`.
    fn add_square(&mut self, w: f64, f: &Affine) {
        if w == 0.0 {
            return;
        }
        self.hessian.ger(2.0 * w, &f.a, &f.a, 1.0);
        self.gradient.axpy(2.0 * w * f.c, &f.a, 1.0);
        self.constant += w * f.c * f.c;
    }

    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z) + self.constant
    }
}

/// Everything the QP needs besides the planner state.
#[derive(Debug, Clone, Copy)]
pub struct OcpTargets<'a> {
    pub goal: &'a AdaptedHandoverGoal,
    pub desired: &'a DesiredPathState,
    pub bounds: &'a BoundSet,
}

/// Fixed problem data shared by all steps.
#[derive(Debug, Clone)]
pub struct OcpModel<'a> {
    pub chain: &'a KinematicChain,
    pub limits: &'a JointLimits,
    pub path: &'a ReferencePath,
    pub cfg: &'a OcpConfig,
}

#[derive(Debug, Clone)]
pub struct AssembledQp {
    pub qp: Qp,
    pub layout: Layout,
    /// Linearization point (slacks at zero).
    pub nominal: DVector<f64>,
    pub trajectory: Trajectory,
    pub stages: Vec<StageLinearization>,
    /// The terminal-cost part of the objective.
    pub terminal: Quadratic,
    /// Constant term dropped from the QP objective.
    pub constant: f64,
}

/// Linearized bounded errors of a stage, `e_p1, e_p2, e_o1, e_o2`.
fn stage_affines(lin: &StageLinearization, cond: &Condensed, layout: &Layout, k: usize, nominal: &DVector<f64>) -> [Affine; 6] {
    let rows = [
        (lin.position.perp1, lin.d_position_dq.row(0), lin.d_position_dphi[0]),
        (lin.position.perp2, lin.d_position_dq.row(1), lin.d_position_dphi[1]),
        (lin.orientation.perp1, lin.d_orientation_dq.row(0), lin.d_orientation_dphi[0]),
        (lin.orientation.perp2, lin.d_orientation_dq.row(1), lin.d_orientation_dphi[1]),
        (lin.position.parallel, lin.d_position_dq.row(2), lin.d_position_dphi[2]),
        (lin.orientation.parallel, lin.d_orientation_dq.row(2), lin.d_orientation_dphi[2]),
    ];
    rows.map(|(value, dq, dphi)| {
        let mut a = DVector::zeros(layout.n_vars());
        for j in 1..=k {
            let s = cond.coeff(k, j)[0];
            for m in 0..layout.joints {
                a[layout.u(j, m)] = dq[m] * s;
            }
            a[layout.v(j)] = dphi * s;
        }
        let c = value - a.dot(nominal);
        Affine { c, a }
    })
}

/// Affine expression of component `comp` of joint `m` (or the path when
/// `m == joints`) at stage `k`.
fn chain_affine(cond: &Condensed, layout: &Layout, k: usize, m: usize, comp: usize, value: f64, nominal: &DVector<f64>) -> Affine {
    let mut a = DVector::zeros(layout.n_vars());
    for j in 1..=k {
        let idx = if m == layout.joints { layout.v(j) } else { layout.u(j, m) };
        a[idx] = cond.coeff(k, j)[comp];
    }
    let c = value - a.dot(nominal);
    Affine { c, a }
}

fn sparse_row(a: &Affine) -> (Vec<usize>, Vec<f64>) {
    a.a.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).unzip()
}

pub fn assemble_qp(
    model: &OcpModel,
    cond: &Condensed,
    state: &PlannerState,
    targets: &OcpTargets,
    nominal_u: &[DVector<f64>],
    nominal_v: &[f64],
) -> Result<AssembledQp> {
    let cfg = model.cfg;
    let n = cfg.horizon;
    let nj = model.chain.n_joints();
    if state.joints.q.len() != nj || nominal_u.len() != n || nominal_v.len() != n {
        return Err(Error::DimensionMismatch { expected: nj, got: state.joints.q.len() });
    }
    if !state.is_finite()
        || nominal_u.iter().any(|u| u.iter().any(|x| !x.is_finite()))
        || nominal_v.iter().any(|x| !x.is_finite())
    {
        return Err(Error::BadWarmStart);
    }
    let layout = Layout { horizon: n, joints: nj };
    let nv = layout.n_vars();
    let nominal = layout.pack(nominal_u, nominal_v);
    let traj = rollout(cond, state, nominal_u, nominal_v);
    let phi_max = model.path.phi_max();

    let mut cost = Quadratic::zeros(nv);
    let mut terminal = Quadratic::zeros(nv);
    let mut qp_rows: Vec<(Vec<usize>, Vec<f64>, f64, f64)> = Vec::new();
    let mut stages = Vec::with_capacity(n);
    let names = ["e_p1", "e_p2", "e_o1", "e_o2"];

    for k in 1..=n {
        let xi = traj.path[k];
        let phi_bar = xi[0].clamp(0.0, phi_max);
        let lin = linearize_stage(model.chain, model.path, traj.joints[k].q.as_slice(), phi_bar)?;
        let [ep1, ep2, eo1, eo2, epar_p, epar_o] = stage_affines(&lin, cond, &layout, k, &nominal);

        cost.add_square(cfg.w_parallel_position, &epar_p);
        cost.add_square(cfg.w_parallel_orientation, &epar_o);
        let desired = [targets.desired.phi, targets.desired.dphi, targets.desired.ddphi];
        for comp in 0..3 {
            let mut f = chain_affine(cond, &layout, k, nj, comp, xi[comp], &nominal);
            f.c -= desired[comp];
            cost.add_square(cfg.w_path_state[comp], &f);
        }
        if cfg.w_joint_velocity > 0.0 {
            for m in 0..nj {
                let f = chain_affine(cond, &layout, k, m, 1, traj.joints[k].dq[m], &nominal);
                cost.add_square(cfg.w_joint_velocity, &f);
            }
        }
        for m in 0..nj {
            cost.hessian[(layout.u(k, m), layout.u(k, m))] += 2.0 * cfg.w_jerk;
        }
        cost.hessian[(layout.v(k), layout.v(k))] += 2.0 * cfg.w_path_jerk;

        if k == n {
            let g = targets.goal;
            let tp = [g.coords.perp1, g.coords.perp2];
            for (f, t) in [(&ep1, tp[0]), (&ep2, tp[1])] {
                let mut f = f.clone();
                f.c -= t;
                terminal.add_square(cfg.w_terminal_position, &f);
            }
            for (f, t) in [(&eo1, g.orientation[0]), (&eo2, g.orientation[1])] {
                let mut f = f.clone();
                f.c -= t;
                terminal.add_square(cfg.w_terminal_orientation, &f);
            }
        }

        // Error corridor, softened by one slack per component.
        for (c, (f, (lo, up))) in [ep1, ep2, eo1, eo2].iter().zip(targets.bounds.eval_all(phi_bar)).enumerate() {
            if lo > up {
                return Err(Error::InfeasibleBounds { what: format!("{} at stage {k}", names[c]) });
            }
            // lo <= e + s and e - s <= up.
            let (mut idx, val) = sparse_row(f);
            idx.push(layout.slack(k, c));
            let mut neg: Vec<f64> = val.iter().map(|v| -v).collect();
            neg.push(-1.0);
            let mut pos = val;
            pos.push(-1.0);
            qp_rows.push((idx.clone(), neg, f64::NEG_INFINITY, f.c - lo));
            qp_rows.push((idx, pos, f64::NEG_INFINITY, up - f.c));
        }

        // Joint and path state boxes.
        let lim = model.limits;
        for m in 0..nj {
            let js = &traj.joints[k];
            let boxes = [(js.q[m], lim.q_min[m], lim.q_max[m]), (js.dq[m], -lim.dq_max[m], lim.dq_max[m]), (js.ddq[m], -lim.ddq_max[m], lim.ddq_max[m])];
            for (comp, (value, lo, hi)) in boxes.into_iter().enumerate() {
                let f = chain_affine(cond, &layout, k, m, comp, value, &nominal);
                let (idx, val) = sparse_row(&f);
                qp_rows.push((idx, val, lo - f.c, hi - f.c));
            }
        }
        let path_boxes = [(0.0, phi_max), (-cfg.path_velocity_max, cfg.path_velocity_max), (-cfg.path_acceleration_max, cfg.path_acceleration_max)];
        for (comp, (lo, hi)) in path_boxes.into_iter().enumerate() {
            let f = chain_affine(cond, &layout, k, nj, comp, xi[comp], &nominal);
            let (idx, val) = sparse_row(&f);
            qp_rows.push((idx, val, lo - f.c, hi - f.c));
        }
        stages.push(lin);
    }

    let mut hessian = &cost.hessian + &terminal.hessian;
    hessian = 0.5 * (&hessian + hessian.transpose());
    let mut gradient = &cost.gradient + &terminal.gradient;
    for k in 1..=n {
        for c in 0..4 {
            gradient[layout.slack(k, c)] = cfg.slack_weight;
        }
    }
    let mut qp = Qp::new(hessian, gradient);
    for j in 1..=n {
        for m in 0..nj {
            qp.lower[layout.u(j, m)] = -model.limits.jerk_max[m];
            qp.upper[layout.u(j, m)] = model.limits.jerk_max[m];
        }
        qp.lower[layout.v(j)] = -cfg.path_jerk_max;
        qp.upper[layout.v(j)] = cfg.path_jerk_max;
        for c in 0..4 {
            qp.lower[layout.slack(j, c)] = 0.0;
        }
    }
    for (idx, val, lo, hi) in qp_rows {
        qp.add_range(idx, val, lo, hi);
    }
    Ok(AssembledQp {
        qp,
        layout,
        nominal,
        trajectory: traj,
        stages,
        constant: cost.constant + terminal.constant,
        terminal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Solved,
    /// The QP hit its iteration limit; the best iterate was used after
    /// clipping the inputs to their box.
    MaxIterations,
    /// The QP failed; the shifted previous plan was applied instead.
    Fallback,
}

impl PlanStatus {
    pub fn code(&self) -> u8 {
        match self {
            PlanStatus::Solved => 0,
            PlanStatus::MaxIterations => 1,
            PlanStatus::Fallback => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub trajectory: Trajectory,
    pub u: Vec<DVector<f64>>,
    pub v: Vec<f64>,
    pub objective: f64,
    pub status: PlanStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub max_slack: f64,
    pub solve_ms: f64,
}

/// Solves the OCP with `cfg.sqp_iterations` linearize-and-solve passes,
/// starting from the warm start stored in `state`.
pub fn solve_ocp(model: &OcpModel, cond: &Condensed, state: &PlannerState, targets: &OcpTargets) -> Result<Plan> {
    let start = Instant::now();
    let mut u = state.warm_u.clone();
    let mut v = state.warm_v.clone();
    let mut last = None;
    let mut status = PlanStatus::Solved;
    for _ in 0..model.cfg.sqp_iterations {
        let assembled = assemble_qp(model, cond, state, targets, &u, &v)?;
        match solve_qp(&assembled.qp, &model.cfg.qp_settings()) {
            Ok(sol) => {
                if sol.status == QpStatus::MaxIterations {
                    status = PlanStatus::MaxIterations;
                }
                let (nu, nv) = assembled.layout.unpack(&sol.z);
                u = nu;
                v = nv;
                let slack = (1..=model.cfg.horizon)
                    .flat_map(|k| (0..4).map(move |c| (k, c)))
                    .map(|(k, c)| sol.z[assembled.layout.slack(k, c)])
                    .fold(0.0f64, f64::max);
                last = Some((sol.objective + assembled.constant, sol.iterations, sol.primal_residual, sol.dual_residual, slack));
            }
            Err(e @ (Error::Infeasible | Error::MaxIterations { .. })) => {
                log::warn!("QP failed ({e}); applying the shifted previous plan");
                status = PlanStatus::Fallback;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if status != PlanStatus::Solved {
        for (uj, _) in u.iter_mut().zip(0..) {
            for m in 0..uj.len() {
                uj[m] = uj[m].clamp(-model.limits.jerk_max[m], model.limits.jerk_max[m]);
            }
        }
        for vj in v.iter_mut() {
            *vj = vj.clamp(-model.cfg.path_jerk_max, model.cfg.path_jerk_max);
        }
    }
    let trajectory = rollout(cond, state, &u, &v);
    let (objective, iterations, primal_residual, dual_residual, max_slack) = last.unwrap_or((f64::NAN, 0, f64::NAN, f64::NAN, 0.0));
    Ok(Plan {
        trajectory,
        u,
        v,
        objective,
        status,
        iterations,
        primal_residual,
        dual_residual,
        max_slack,
        solve_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

impl PlannerState {
    /// Moves to stage 1 of `plan` and shifts the plan into the warm start.
    pub fn advance(&mut self, plan: &Plan) {
        self.joints = plan.trajectory.joints[1].clone();
        self.path = plan.trajectory.path[1];
        self.u = plan.u[0].clone();
        self.v = plan.v[0];
        let n = plan.u.len();
        self.warm_u = (1..=n).map(|j| plan.u[j.min(n - 1)].clone()).collect();
        self.warm_v = (1..=n).map(|j| plan.v[j.min(n - 1)]).collect();
    }
}

/// Discretization and condensing matrices for a configuration.
pub fn prepare(cfg: &OcpConfig) -> Result<(Discretization, Condensed)> {
    let d = discretize_dynamics(cfg.sample_time)?;
    let c = Condensed::new(&d, cfg.horizon);
    Ok((d, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refpath::PathCoordinates;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_indices_are_disjoint() {
        let l = Layout { horizon: 3, joints: 2 };
        let mut seen = std::collections::HashSet::new();
        for j in 1..=3 {
            for m in 0..2 {
                assert!(seen.insert(l.u(j, m)));
            }
            assert!(seen.insert(l.v(j)));
            for c in 0..4 {
                assert!(seen.insert(l.slack(j, c)));
            }
        }
        assert_eq!(seen.len(), l.n_vars());
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let chain = KinematicChain::default();
        let q0 = [0.1, 0.5, -0.2, -1.2, 0.3, 0.8, 0.2];
        let p = chain.forward_kinematics(&q0).unwrap();
        let o = crate::so3::log_map(&p.rotation).unwrap();
        let path = ReferencePath::from_via_points(
            &[p.position - Vector3::new(0.2, 0.05, 0.0), p.position + Vector3::new(0.3, 0.1, 0.05)],
            &[o - Vector3::new(0.1, 0.0, 0.2), o + Vector3::new(0.2, 0.1, 0.0)],
        )
        .unwrap();
        let phi = 0.2;
        let lin = linearize_stage(&chain, &path, &q0, phi).unwrap();
        let h = 1e-6;
        let errs = |q: &[f64], phi: f64| {
            let pose = chain.forward_kinematics(q).unwrap();
            let a = path.decompose_position_error(&pose.position, phi).unwrap();
            let b = path.decompose_orientation_error(&pose.rotation, phi).unwrap();
            [a.perp1, a.perp2, a.parallel, b.perp1, b.perp2, b.parallel]
        };
        for m in 0..7 {
            let mut qp = q0;
            let mut qm = q0;
            qp[m] += h;
            qm[m] -= h;
            let (ep, em) = (errs(&qp, phi), errs(&qm, phi));
            for r in 0..3 {
                assert!(((ep[r] - em[r]) / (2.0 * h) - lin.d_position_dq[(r, m)]).abs() < 1e-6);
                assert!(((ep[r + 3] - em[r + 3]) / (2.0 * h) - lin.d_orientation_dq[(r, m)]).abs() < 1e-6);
            }
        }
        let (ep, em) = (errs(&q0, phi + h), errs(&q0, phi - h));
        for r in 0..3 {
            assert!(((ep[r] - em[r]) / (2.0 * h) - lin.d_position_dphi[r]).abs() < 1e-6);
            assert!(((ep[r + 3] - em[r + 3]) / (2.0 * h) - lin.d_orientation_dphi[r]).abs() < 1e-6);
        }
    }

    #[test]
    fn rollout_satisfies_dynamics() {
        let cfg = OcpConfig::default();
        let (d, cond) = prepare(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = PlannerState::at_rest(DVector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0)), 0.1, cfg.horizon);
        state.u = DVector::from_fn(7, |_, _| rng.gen_range(-5.0..5.0));
        let u: Vec<DVector<f64>> = (0..cfg.horizon).map(|_| DVector::from_fn(7, |_, _| rng.gen_range(-5.0..5.0))).collect();
        let v: Vec<f64> = (0..cfg.horizon).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rollout(&cond, &state, &u, &v);
        for k in 0..cfg.horizon {
            let u0 = if k == 0 { state.u.clone() } else { u[k - 1].clone() };
            for m in 0..7 {
                let x = Vector3::new(t.joints[k].q[m], t.joints[k].dq[m], t.joints[k].ddq[m]);
                let next = d.step(&x, u0[m], u[k][m]);
                let got = Vector3::new(t.joints[k + 1].q[m], t.joints[k + 1].dq[m], t.joints[k + 1].ddq[m]);
                assert!((next - got).amax() < 1e-12);
            }
            let v0 = if k == 0 { state.v } else { v[k - 1] };
            assert!((d.step(&t.path[k], v0, v[k]) - t.path[k + 1]).amax() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OcpConfig::default().validate().is_ok());
        let bad = OcpConfig { w_terminal_orientation: 600.0, ..OcpConfig::default() };
        assert!(bad.validate().is_err());
        let bad = OcpConfig { horizon: 1, ..OcpConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nan_warm_start_is_rejected() {
        let cfg = OcpConfig::default();
        let (_, cond) = prepare(&cfg).unwrap();
        let chain = KinematicChain::default();
        let limits = JointLimits::default();
        let path = ReferencePath::from_via_points(&[Vector3::zeros(), Vector3::x()], &[Vector3::zeros(), Vector3::zeros()]).unwrap();
        let model = OcpModel { chain: &chain, limits: &limits, path: &path, cfg: &cfg };
        let mut state = PlannerState::at_rest(DVector::zeros(7), 0.0, cfg.horizon);
        state.warm_v[3] = f64::NAN;
        let c = PathCoordinates::default();
        let goal = AdaptedHandoverGoal {
            coords: c,
            half_widths: [0.1, 0.1],
            orientation: [0.0, 0.0],
            w_pred: 1.0,
            d_pred: 0.0,
            hand: c,
            predicted: c,
            clamped: false,
        };
        let bounds = crate::bounds::BoundsConfig::default().initial(0.0);
        let targets = OcpTargets { goal: &goal, desired: &DesiredPathState::default(), bounds: &bounds };
        assert!(matches!(assemble_qp(&model, &cond, &state, &targets, &state.warm_u, &state.warm_v), Err(Error::BadWarmStart)));
    }
}
