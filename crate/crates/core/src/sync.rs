//! Desired path state that keeps robot and human progress in step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncParams {
    /// Saturation speed of the desired path velocity (m/s).
    pub max_speed: f64,
    /// Gain inside the tanh (1/m).
    pub gain: f64,
    /// Offset (m); positive values let the robot lead slightly.
    pub offset: f64,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self { max_speed: 0.5, gain: 5.0, offset: 0.05 }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return Err(Error::Validation { field: "sync.max_speed".into(), message: "must be positive".into() });
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Validation { field: "sync.gain".into(), message: "must be positive".into() });
        }
        if !self.offset.is_finite() {
            return Err(Error::Validation { field: "sync.offset".into(), message: "must be finite".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DesiredPathState {
    pub phi: f64,
    pub dphi: f64,
    pub ddphi: f64,
}

/// Saturated proportional law on the difference of the robot's and the
/// human's remaining path distance to the goal `phi_goal`. The velocity goes
/// negative when the hand is further from the goal than the robot by more
/// than the offset.
pub fn desired_path_state(phi_goal: f64, phi_h: f64, phi_c: f64, params: &SyncParams) -> DesiredPathState {
    let d_h = phi_h - phi_goal;
    let d_r = phi_goal - phi_c;
    let dphi = params.max_speed * (params.gain * (d_r - d_h + params.offset)).tanh();
    DesiredPathState { phi: phi_goal, dphi, ddphi: 0.0 }
}
