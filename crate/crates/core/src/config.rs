//! Scenario files (TOML).

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundsConfig;
use crate::error::{Error, Result};
use crate::gpr::Hyperparameters;
use crate::kinematics::{JointLimits, KinematicChain};
use crate::ocp::OcpConfig;
use crate::planner::PlannerConfig;
use crate::predictor::PredictorParams;
use crate::refpath::ReferencePath;
use crate::sim::{HandScript, TrainingConfig};
use crate::so3::log_map;
use crate::sync::SyncParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    pub chain: KinematicChain,
    pub limits: JointLimits,
    pub q0: Vec<f64>,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            chain: KinematicChain::default(),
            limits: JointLimits::default(),
            q0: vec![-1.6, 0.2, 0.0, -1.8, 0.0, -0.9, 0.0],
        }
    }
}

/// Reference path: robot start pose, approach point and the initial
/// handover location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub approach_point: [f64; 3],
    pub handover_point: [f64; 3],
    /// Direction the tool z axis points at the handover.
    pub hand_direction: [f64; 3],
    /// Allowed travel past the nominal handover point (m).
    pub extension: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            approach_point: [0.70, 0.0, 0.50],
            handover_point: [0.90, 0.0, 0.50],
            hand_direction: [1.0, 0.0, 0.0],
            extension: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspConfig {
    pub position_tolerance: f64,
    pub phi_tolerance: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self { position_tolerance: 0.01, phi_tolerance: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Simulated time cap (s).
    pub duration: f64,
    pub robot: RobotConfig,
    pub path: PathConfig,
    pub hand: HandScript,
    pub training: TrainingConfig,
    pub gp: Hyperparameters,
    pub grasp: GraspConfig,
    pub ocp: OcpConfig,
    pub predictor: PredictorParams,
    pub sync: SyncParams,
    pub bounds: BoundsConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "nominal".into(),
            seed: 0,
            duration: 8.0,
            robot: RobotConfig::default(),
            path: PathConfig::default(),
            hand: HandScript::default(),
            training: TrainingConfig::default(),
            gp: Hyperparameters::default(),
            grasp: GraspConfig::default(),
            ocp: OcpConfig::default(),
            predictor: PredictorParams::default(),
            sync: SyncParams::default(),
            bounds: BoundsConfig::default(),
        }
    }
}

fn validation(field: &str, message: impl Into<String>) -> Error {
    Error::Validation { field: field.into(), message: message.into() }
}

impl Scenario {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    format!("{origin}:{line}")
                }
                None => origin.to_string(),
            };
            Error::Parse { location, message: e.message().to_string() }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig { ocp: self.ocp.clone(), predictor: self.predictor.clone(), sync: self.sync.clone(), bounds: self.bounds.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(validation("duration", "must be positive"));
        }
        self.robot.chain.validate()?;
        let n = self.robot.chain.n_joints();
        self.robot.limits.validate(n)?;
        if self.robot.q0.len() != n {
            return Err(validation("robot.q0", format!("expected {n} entries, got {}", self.robot.q0.len())));
        }
        for (i, q) in self.robot.q0.iter().enumerate() {
            if !(self.robot.limits.q_min[i]..=self.robot.limits.q_max[i]).contains(q) {
                return Err(validation("robot.q0", format!("joint {} outside its limits", i + 1)));
            }
        }
        if !(self.path.extension >= 0.0) {
            return Err(validation("path.extension", "must be nonnegative"));
        }
        if Vector3::from(self.path.hand_direction).norm() < 1e-9 {
            return Err(validation("path.hand_direction", "must be nonzero"));
        }
        self.hand.validate()?;
        self.training.validate()?;
        self.gp.validate()?;
        if !(self.grasp.position_tolerance > 0.0 && self.grasp.phi_tolerance > 0.0) {
            return Err(validation("grasp", "tolerances must be positive"));
        }
        self.planner_config().validate()?;
        self.build_path()?;
        Ok(())
    }

    /// Two-segment path from the tool pose at `q0` through the approach
    /// point to the handover point.
    pub fn build_path(&self) -> Result<ReferencePath> {
        let pose = self.robot.chain.forward_kinematics(&self.robot.q0)?;
        log_map(&pose.rotation)?;
        let path = ReferencePath::build_handover(
            pose.position,
            Vector3::from(self.path.approach_point),
            Vector3::from(self.path.handover_point),
            &pose.rotation,
            &Vector3::from(self.path.hand_direction),
        )?;
        Ok(path.with_extension(self.path.extension))
    }
}
