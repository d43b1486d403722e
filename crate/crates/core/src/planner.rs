//! One control step: prediction, synchronization, bound replanning and the
//! OCP solve, followed by applying the first input.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bounds::{replan_bounds, BoundSet, BoundsConfig};
use crate::dynamics::Condensed;
use crate::error::{Error, Result};
use crate::gpr::HandoverModel;
use crate::kinematics::{JointLimits, KinematicChain};
use crate::ocp::{prepare, solve_ocp, OcpConfig, OcpModel, OcpTargets, Plan, PlannerState};
use crate::predictor::{adapt_goal, predict_handover_location, AdaptedHandoverGoal, HumanObservation, PredictorParams};
use crate::refpath::ReferencePath;
use crate::sync::{desired_path_state, DesiredPathState, SyncParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub ocp: OcpConfig,
    pub predictor: PredictorParams,
    pub sync: SyncParams,
    pub bounds: BoundsConfig,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        self.predictor.validate()?;
        self.sync.validate()?;
        self.bounds.validate()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub goal: AdaptedHandoverGoal,
    pub desired: DesiredPathState,
    /// Bounds replanned at the current path parameter and used by the plan.
    pub bounds: BoundSet,
    pub bounds_inverted: bool,
    pub plan: Plan,
}

#[derive(Debug, Clone)]
pub struct Planner {
    chain: KinematicChain,
    limits: JointLimits,
    path: ReferencePath,
    model: HandoverModel,
    cfg: PlannerConfig,
    cond: Condensed,
    state: PlannerState,
    bounds: BoundSet,
    phi0: f64,
}

impl Planner {
    /// Planner at rest at `q0`, on the path at `phi = 0`.
    pub fn new(
        chain: KinematicChain,
        limits: JointLimits,
        path: ReferencePath,
        model: HandoverModel,
        cfg: PlannerConfig,
        q0: &[f64],
    ) -> Result<Self> {
        chain.validate()?;
        limits.validate(chain.n_joints())?;
        cfg.validate()?;
        if q0.len() != chain.n_joints() {
            return Err(Error::DimensionMismatch { expected: chain.n_joints(), got: q0.len() });
        }
        let (_, cond) = prepare(&cfg.ocp)?;
        let phi0 = path.segments()[path.last_segment_index()].phi_start;
        let state = PlannerState::at_rest(DVector::from_column_slice(q0), 0.0, cfg.ocp.horizon);
        let bounds = cfg.bounds.initial(phi0);
        Ok(Self { chain, limits, path, model, cfg, cond, state, bounds, phi0 })
    }

    pub fn state(&self) -> &PlannerState {
        &self.state
    }

    pub fn bounds(&self) -> &BoundSet {
        &self.bounds
    }

    pub fn path(&self) -> &ReferencePath {
        &self.path
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    /// Start of the handover segment.
    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    /// Goal, desired path state and replanned bounds for the current state,
    /// without solving or advancing.
    pub fn targets(&self, obs: &HumanObservation) -> Result<(AdaptedHandoverGoal, DesiredPathState, BoundSet, bool)> {
        let pred = predict_handover_location(&self.model, obs);
        let goal = adapt_goal(&pred, obs, &self.path, &self.cfg.predictor)?;
        let phi_c = self.state.path[0];
        let desired = desired_path_state(goal.coords.phi, goal.hand.phi, phi_c, &self.cfg.sync);
        let replanned = replan_bounds(&self.bounds, phi_c, self.phi0, &goal, &self.cfg.bounds);
        Ok((goal, desired, replanned.bounds, replanned.inverted))
    }

    /// Runs one control step and advances the state by one sample.
    pub fn step(&mut self, obs: &HumanObservation) -> Result<StepOutput> {
        let (goal, desired, bounds, inverted) = self.targets(obs)?;
        if inverted {
            log::warn!("inverted bound targets at t = {}; widened to the minimum width", obs.t);
        }
        let model = OcpModel { chain: &self.chain, limits: &self.limits, path: &self.path, cfg: &self.cfg.ocp };
        let targets = OcpTargets { goal: &goal, desired: &desired, bounds: &bounds };
        let plan = solve_ocp(&model, &self.cond, &self.state, &targets)?;
        self.bounds = bounds;
        self.state.advance(&plan);
        Ok(StepOutput { goal, desired, bounds, bounds_inverted: inverted, plan })
    }
}
