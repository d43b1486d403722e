//! Trajectory planning for human-to-robot handovers.
//!
//! A path-following MPC drives a 7-DoF arm along a reference path that ends
//! at a handover location predicted from the human's hand motion by Gaussian
//! process regression. Quadratic error bounds narrow toward the prediction and
//! a synchronization law paces the robot with the human.

pub mod bounds;
pub mod bridge;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod gpr;
pub mod kinematics;
pub mod logfile;
pub mod ocp;
pub mod planner;
pub mod predictor;
pub mod qp;
pub mod refpath;
pub mod sim;
pub mod so3;
pub mod sync;

pub use config::Scenario;
pub use error::{Error, Result};
pub use planner::{Planner, PlannerConfig};
pub use sim::{run_closed_loop, SimLog};
