//! Synthetic hand motion, GPR training data and the closed-loop harness.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::bounds::BoundSet;
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::gpr::{HandoverModel, TrainingSet};
use crate::ocp::PlanStatus;
use crate::planner::Planner;
use crate::predictor::HumanObservation;
use crate::so3::{exp_map, log_map, rpy_from_rotation, RpyAngles};

/// Minimum-jerk point-to-point motion; returns position and velocity at `t`.
pub fn min_jerk_trajectory(p0: &Vector3<f64>, pf: &Vector3<f64>, duration: f64, t: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if !(duration > 0.0) {
        return Err(Error::OutOfRange { value: duration, min: 0.0, max: f64::INFINITY });
    }
    if !(0.0..=duration).contains(&t) {
        return Err(Error::OutOfRange { value: t, min: 0.0, max: duration });
    }
    if t == duration {
        return Ok((*pf, Vector3::zeros()));
    }
    let tau = t / duration;
    let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
    let ds = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / duration;
    let d = pf - p0;
    Ok((p0 + d * s, d * ds))
}

/// Parameters of the synthetic training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub goal_min: [f64; 3],
    pub goal_max: [f64; 3],
    pub rest_center: [f64; 3],
    pub rest_radius: f64,
    pub trajectories: usize,
    pub duration: f64,
    /// Subsampling rate (Hz).
    pub rate: f64,
    /// Standard deviation of the label noise (m).
    pub noise: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            goal_min: [0.80, -0.08, 0.42],
            goal_max: [0.95, 0.10, 0.60],
            rest_center: [1.30, 0.05, 0.35],
            rest_radius: 0.08,
            trajectories: 40,
            duration: 2.0,
            rate: 10.0,
            noise: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Validation { field: format!("training.{field}"), message: message.into() });
        if self.trajectories == 0 {
            return bad("trajectories", "must be at least 1");
        }
        if (0..3).any(|i| !(self.goal_min[i] <= self.goal_max[i])) {
            return bad("goal_min", "must not exceed goal_max");
        }
        if !(self.duration > 0.0) || !(self.rate > 0.0) {
            return bad("duration", "duration and rate must be positive");
        }
        if !(self.rest_radius >= 0.0) || !(self.noise >= 0.0) {
            return bad("noise", "rest_radius and noise must be nonnegative");
        }
        Ok(())
    }

    pub fn samples_per_trajectory(&self) -> usize {
        (self.duration * self.rate).round() as usize + 1
    }
}

pub fn generate_training_data(cfg: &TrainingConfig, seed: u64) -> Result<TrainingSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Validation { field: "training.noise".into(), message: e.to_string() })?;
    let center = Vector3::from(cfg.rest_center);
    let n_k = cfg.samples_per_trajectory();
    let mut set = TrainingSet { inputs: Vec::new(), goals: Vec::new() };
    for _ in 0..cfg.trajectories {
        let goal = Vector3::from_fn(|i, _| {
            if cfg.goal_min[i] == cfg.goal_max[i] {
                cfg.goal_min[i]
            } else {
                rng.gen_range(cfg.goal_min[i]..cfg.goal_max[i])
            }
        });
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let start = center + Vector3::from(dir) * cfg.rest_radius;
        for i in 0..n_k {
            let t = (i as f64 / (n_k - 1) as f64) * cfg.duration;
            let (p, v) = min_jerk_trajectory(&start, &goal, cfg.duration, t)?;
            set.inputs.push([p.x, p.y, p.z, v.x, v.y, v.z]);
            let label = if cfg.noise > 0.0 { goal + Vector3::from_fn(|_, _| noise.sample(&mut rng)) } else { goal };
            set.goals.push([label.x, label.y, label.z]);
        }
    }
    Ok(set)
}

/// One minimum-jerk move of the hand followed by a hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandLeg {
    pub to: [f64; 3],
    pub duration: f64,
    #[serde(default)]
    pub hold: f64,
}

/// Scripted hand motion: wait, then a sequence of legs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandScript {
    pub start: [f64; 3],
    pub start_delay: f64,
    pub legs: Vec<HandLeg>,
    /// Hand orientation relative to the path's goal orientation (roll,
    /// pitch, yaw).
    pub rpy: [f64; 3],
}

impl Default for HandScript {
    fn default() -> Self {
        Self {
            start: [1.30, 0.10, 0.35],
            start_delay: 0.6,
            legs: vec![HandLeg { to: [0.902, 0.03, 0.52], duration: 2.0, hold: 0.0 }],
            rpy: [0.0, 0.0, 0.0],
        }
    }
}

impl HandScript {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_delay >= 0.0) {
            return Err(Error::Validation { field: "hand.start_delay".into(), message: "must be nonnegative".into() });
        }
        for (i, leg) in self.legs.iter().enumerate() {
            if !(leg.duration > 0.0) || !(leg.hold >= 0.0) {
                return Err(Error::Validation {
                    field: format!("hand.legs[{i}]"),
                    message: "duration must be positive and hold nonnegative".into(),
                });
            }
        }
        Ok(())
    }

    pub fn final_position(&self) -> Vector3<f64> {
        Vector3::from(self.legs.last().map_or(self.start, |l| l.to))
    }

    /// Time at which the last leg ends.
    pub fn arrival_time(&self) -> f64 {
        let mut t = self.start_delay;
        for (i, leg) in self.legs.iter().enumerate() {
            t += leg.duration;
            if i + 1 < self.legs.len() {
                t += leg.hold;
            }
        }
        t
    }

    /// Hand position and velocity at time `t`.
    pub fn sample(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let mut from = Vector3::from(self.start);
        let mut t0 = self.start_delay;
        if t <= t0 {
            return (from, Vector3::zeros());
        }
        for leg in &self.legs {
            let to = Vector3::from(leg.to);
            if t < t0 + leg.duration {
                return min_jerk_trajectory(&from, &to, leg.duration, t - t0).expect("time inside the leg");
            }
            t0 += leg.duration;
            from = to;
            if t < t0 + leg.hold {
                return (from, Vector3::zeros());
            }
            t0 += leg.hold;
        }
        (from, Vector3::zeros())
    }
}

/// One log row; see [`crate::logfile::LOG_HEADER`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub p_r: [f64; 3],
    pub rpy_r: [f64; 3],
    pub phi_c: f64,
    pub dphi: f64,
    pub phi_h: f64,
    pub phi_ho: f64,
    pub w_pred: f64,
    /// `e_p1, e_p2, e_o1, e_o2` at the logged state.
    pub e_orth: [f64; 4],
    /// `(lower, upper)` per bounded component at `phi_c`.
    pub bounds: [(f64, f64); 4],
    pub status: PlanStatus,
    pub solve_ms: f64,
}

/// Quantities kept alongside the log for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepExtras {
    pub p_h: [f64; 3],
    /// Angle between robot and hand orientation (rad).
    pub orientation_error: f64,
    /// `|e_new(phi_c) - e_prev(phi_c)|` over all eight bounds.
    pub bound_jump: f64,
    /// Corridor widths at the adapted goal parameter.
    pub goal_widths: [f64; 4],
    pub max_slack: f64,
    pub grasped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: String,
    pub seed: u64,
    pub sample_time: f64,
    pub rows: Vec<LogRow>,
    pub extras: Vec<StepExtras>,
    /// First logged time at which the grasp condition held.
    pub grasp_time: Option<f64>,
}

/// Planner plus the per-step bookkeeping needed for logging.
#[derive(Debug, Clone)]
pub struct Simulation {
    planner: Planner,
    goal_rotation: Matrix3<f64>,
    position_tolerance: f64,
    phi_tolerance: f64,
    timing: bool,
    last_status: PlanStatus,
}

impl Simulation {
    pub fn new(scenario: &Scenario, model: HandoverModel) -> Result<Self> {
        let path = scenario.build_path()?;
        let seg = &path.segments()[path.last_segment_index()];
        let goal_rotation = exp_map(&seg.o_end);
        let planner = Planner::new(
            scenario.robot.chain.clone(),
            scenario.robot.limits.clone(),
            path,
            model,
            scenario.planner_config(),
            &scenario.robot.q0,
        )?;
        Ok(Self {
            planner,
            goal_rotation,
            position_tolerance: scenario.grasp.position_tolerance,
            phi_tolerance: scenario.grasp.phi_tolerance,
            timing: false,
            last_status: PlanStatus::Solved,
        })
    }

    /// Record wall-clock solve times in the log (breaks byte-identical logs).
    pub fn with_timing(mut self, timing: bool) -> Self {
        self.timing = timing;
        self
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    /// Orientation of the goal on the reference path.
    pub fn goal_rotation(&self) -> &Matrix3<f64> {
        &self.goal_rotation
    }

    /// Hand rotation for an orientation offset relative to the goal.
    pub fn hand_rotation(&self, rpy: &[f64; 3]) -> Matrix3<f64> {
        self.goal_rotation * RpyAngles::new(rpy[0], rpy[1], rpy[2]).to_rotation()
    }

    fn measure(&self) -> Result<Measured> {
        let state = self.planner.state();
        let q: Vec<f64> = state.joints.q.iter().copied().collect();
        let pose = self.planner.chain().forward_kinematics(&q)?;
        let phi_c = state.path[0];
        let path = self.planner.path();
        let phi_eval = phi_c.clamp(0.0, path.phi_max());
        let ep = path.decompose_position_error(&pose.position, phi_eval)?;
        let eo = path.decompose_orientation_error(&pose.rotation, phi_eval)?;
        let rpy = rpy_from_rotation(&pose.rotation)?;
        Ok(Measured {
            dq: state.joints.dq.iter().copied().collect(),
            q,
            p_r: pose.position,
            rotation: pose.rotation,
            rpy_r: rpy.as_array(),
            phi_c,
            dphi: state.path[1],
            phi_eval,
            e_orth: [ep.perp1, ep.perp2, eo.perp1, eo.perp2],
        })
    }

    fn grasp_check(&self, m: &Measured, obs: &HumanObservation, phi_h: f64, phi_ho: f64) -> (bool, f64) {
        let grasped = (m.p_r - obs.position).norm() < self.position_tolerance && (phi_h - phi_ho).abs() < self.phi_tolerance;
        let orientation_error = log_map(&(m.rotation * obs.rotation.transpose())).map(|v| v.norm()).unwrap_or(std::f64::consts::PI);
        (grasped, orientation_error)
    }

    /// Logs the current state against the targets for `obs`, then advances
    /// the planner by one step.
    pub fn step(&mut self, obs: &HumanObservation) -> Result<(LogRow, StepExtras)> {
        let prev_bounds: BoundSet = *self.planner.bounds();
        let m = self.measure()?;
        let out = self.planner.step(obs)?;
        self.last_status = out.plan.status;
        let bounds = out.bounds.eval_all(m.phi_eval);
        let bound_jump = prev_bounds
            .eval_all(m.phi_eval)
            .iter()
            .zip(bounds.iter())
            .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
            .fold(0.0, f64::max);
        let phi_ho = out.goal.coords.phi;
        let goal_widths = out.bounds.pairs().map(|p| p.width(phi_ho));
        let (grasped, orientation_error) = self.grasp_check(&m, obs, out.goal.hand.phi, phi_ho);
        let row = self.row(m, obs.t, out.goal.hand.phi, phi_ho, out.goal.w_pred, bounds, out.plan.status, out.plan.solve_ms);
        let extras = StepExtras {
            p_h: obs.position.into(),
            orientation_error,
            bound_jump,
            goal_widths,
            max_slack: out.plan.max_slack,
            grasped,
        };
        Ok((row, extras))
    }

    /// Logs the current state against the targets for `obs` without solving;
    /// closes a run with the state reached by the last step.
    pub fn terminal(&self, obs: &HumanObservation) -> Result<(LogRow, StepExtras)> {
        let m = self.measure()?;
        let (goal, _, _, _) = self.planner.targets(obs)?;
        let stored = self.planner.bounds();
        let bounds = stored.eval_all(m.phi_eval);
        let phi_ho = goal.coords.phi;
        let goal_widths = stored.pairs().map(|p| p.width(phi_ho));
        let (grasped, orientation_error) = self.grasp_check(&m, obs, goal.hand.phi, phi_ho);
        let row = self.row(m, obs.t, goal.hand.phi, phi_ho, goal.w_pred, bounds, self.last_status, 0.0);
        let extras = StepExtras { p_h: obs.position.into(), orientation_error, bound_jump: 0.0, goal_widths, max_slack: 0.0, grasped };
        Ok((row, extras))
    }

    #[allow(clippy::too_many_arguments)]
    fn row(&self, m: Measured, t: f64, phi_h: f64, phi_ho: f64, w_pred: f64, bounds: [(f64, f64); 4], status: PlanStatus, solve_ms: f64) -> LogRow {
        LogRow {
            t,
            q: m.q,
            dq: m.dq,
            p_r: m.p_r.into(),
            rpy_r: m.rpy_r,
            phi_c: m.phi_c,
            dphi: m.dphi,
            phi_h,
            phi_ho,
            w_pred,
            e_orth: m.e_orth,
            bounds,
            status,
            solve_ms: if self.timing { solve_ms } else { 0.0 },
        }
    }
}

struct Measured {
    q: Vec<f64>,
    dq: Vec<f64>,
    p_r: Vector3<f64>,
    rotation: Matrix3<f64>,
    rpy_r: [f64; 3],
    phi_c: f64,
    dphi: f64,
    phi_eval: f64,
    e_orth: [f64; 4],
}

/// Runs the scripted scenario for `scenario.duration`.
pub fn run_closed_loop(scenario: &Scenario, model: HandoverModel) -> Result<SimLog> {
    let sim = Simulation::new(scenario, model)?;
    let hand = &scenario.hand;
    let rotation = sim.hand_rotation(&hand.rpy);
    let observe = |t: f64| {
        let (p, v) = hand.sample(t);
        HumanObservation { position: p, velocity: v, rotation, t }
    };
    run_observations(scenario, sim, observe)
}

/// Runs with observations taken from a recorded stream; the latest sample at
/// or before each control instant is used.
pub fn run_with_stream(scenario: &Scenario, model: HandoverModel, stream: &[HumanObservation]) -> Result<SimLog> {
    run_stream_with(scenario, Simulation::new(scenario, model)?, stream)
}

/// [`run_with_stream`] on a prepared simulation (e.g. with timing enabled).
pub fn run_stream_with(scenario: &Scenario, sim: Simulation, stream: &[HumanObservation]) -> Result<SimLog> {
    if stream.is_empty() {
        return Err(Error::Validation { field: "hand stream".into(), message: "empty".into() });
    }
    let observe = |t: f64| {
        let i = stream.partition_point(|o| o.t <= t + 1e-9).max(1) - 1;
        HumanObservation { t, ..stream[i] }
    };
    run_observations(scenario, sim, observe)
}

/// Solves at every control instant `0, T_s, .., duration`, then logs the
/// final state, so an `n`-step run has `n + 1` rows.
fn run_observations(scenario: &Scenario, mut sim: Simulation, observe: impl Fn(f64) -> HumanObservation) -> Result<SimLog> {
    let ts = scenario.ocp.sample_time;
    let steps = (scenario.duration / ts).round() as usize + 1;
    let mut log = SimLog {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        sample_time: ts,
        rows: Vec::with_capacity(steps + 1),
        extras: Vec::with_capacity(steps + 1),
        grasp_time: None,
    };
    for k in 0..=steps {
        let obs = observe(k as f64 * ts);
        let (row, extras) = if k < steps { sim.step(&obs)? } else { sim.terminal(&obs)? };
        if extras.grasped && log.grasp_time.is_none() {
            log.grasp_time = Some(row.t);
        }
        log.rows.push(row);
        log.extras.push(extras);
    }
    if log.grasp_time.is_none() {
        log::warn!("scenario {}: no grasp within {} s", scenario.name, scenario.duration);
    }
    Ok(log)
}

/// Hand observations sampled from a script on the control grid, used to
/// record streams for replay.
pub fn scripted_stream(scenario: &Scenario, rotation: &Matrix3<f64>) -> Vec<HumanObservation> {
    let ts = scenario.ocp.sample_time;
    let steps = (scenario.duration / ts).round() as usize;
    (0..=steps)
        .map(|k| {
            let t = k as f64 * ts;
            let (p, v) = scenario.hand.sample(t);
            HumanObservation { position: p, velocity: v, rotation: *rotation, t }
        })
        .collect()
}
