//! Quadratic bounding functions on the orthogonal path errors.
//!
//! There are eight of them (position/orientation, two directions, lower and
//! upper). Every control step they are replanned so that the new function
//! passes through the old one's value at the robot's current path parameter
//! and reaches the goal corridor at the adapted handover parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::AdaptedHandoverGoal;

const DEGENERATE_ANCHOR: f64 = 1e-6;

/// `c + a (phi - anchor)^2` on `[start, end]`, constant outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticBound {
    pub c: f64,
    pub a: f64,
    pub anchor: f64,
    pub start: f64,
    pub end: f64,
}

impl QuadraticBound {
    pub fn constant(c: f64, start: f64) -> Self {
        Self { c, a: 0.0, anchor: start, start, end: start }
    }

    pub fn eval(&self, phi: f64) -> f64 {
        let p = phi.clamp(self.start.min(self.end), self.start.max(self.end));
        let d = p - self.anchor;
        self.c + self.a * d * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPair {
    pub lower: QuadraticBound,
    pub upper: QuadraticBound,
}

impl BoundPair {
    pub fn eval(&self, phi: f64) -> (f64, f64) {
        (self.lower.eval(phi), self.upper.eval(phi))
    }

    pub fn width(&self, phi: f64) -> f64 {
        self.upper.eval(phi) - self.lower.eval(phi)
    }
}

/// The eight bounding functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSet {
    pub position: [BoundPair; 2],
    pub orientation: [BoundPair; 2],
}

impl BoundSet {
    pub fn pairs(&self) -> [&BoundPair; 4] {
        [&self.position[0], &self.position[1], &self.orientation[0], &self.orientation[1]]
    }

    /// `(lower, upper)` for `e_p1, e_p2, e_o1, e_o2` at `phi`.
    pub fn eval_all(&self, phi: f64) -> [(f64, f64); 4] {
        self.pairs().map(|p| p.eval(phi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    /// Initial symmetric half-width of the position corridor (m).
    pub initial_position: f64,
    /// Initial symmetric half-width of the orientation corridor (rad).
    pub initial_orientation: f64,
    pub min_width_position: f64,
    pub min_width_orientation: f64,
    /// Half-width around the orientation targets (rad).
    pub orientation_half_width: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            initial_position: 0.3,
            initial_orientation: 0.6,
            min_width_position: 0.002,
            min_width_orientation: 0.02,
            orientation_half_width: 0.05,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("initial_position", self.initial_position),
            ("initial_orientation", self.initial_orientation),
            ("min_width_position", self.min_width_position),
            ("min_width_orientation", self.min_width_orientation),
            ("orientation_half_width", self.orientation_half_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation { field: format!("bounds.{name}"), message: "must be positive".into() });
            }
        }
        Ok(())
    }

    /// Constant corridor used when the robot enters the handover segment at `phi0`.
    pub fn initial(&self, phi0: f64) -> BoundSet {
        let pair = |h: f64| BoundPair {
            lower: QuadraticBound::constant(-h, phi0),
            upper: QuadraticBound::constant(h, phi0),
        };
        BoundSet {
            position: [pair(self.initial_position), pair(self.initial_position)],
            orientation: [pair(self.initial_orientation), pair(self.initial_orientation)],
        }
    }
}

/// Outcome of one replanning step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replanned {
    pub bounds: BoundSet,
    /// Set when a target interval had to be widened because lower > upper.
    pub inverted: bool,
}

fn replan_one(prev: &QuadraticBound, phi_r: f64, phi0: f64, anchor: f64, c: f64) -> QuadraticBound {
    let at = phi_r.max(phi0);
    let dist = at - anchor;
    if dist.abs() < DEGENERATE_ANCHOR {
        return QuadraticBound { c, a: 0.0, anchor, start: phi0, end: anchor };
    }
    let a = (prev.eval(at) - c) / (dist * dist);
    QuadraticBound { c, a, anchor, start: phi0, end: anchor.max(at) }
}

/// Target interval `[centre - half, centre + half]` widened to `min_width`.
fn target_interval(centre: f64, half: f64, min_width: f64) -> Result<(f64, f64)> {
    let (lo, hi) = (centre - half, centre + half);
    if hi < lo {
        return Err(Error::InvertedBounds);
    }
    if hi - lo < min_width {
        Ok((centre - 0.5 * min_width, centre + 0.5 * min_width))
    } else {
        Ok((lo, hi))
    }
}

/// Replans all eight bounds around the adapted goal.
///
/// `phi0` is the start of the handover segment; `phi_r` the robot's current
/// path parameter.
pub fn replan_bounds(
    prev: &BoundSet,
    phi_r: f64,
    phi0: f64,
    goal: &AdaptedHandoverGoal,
    cfg: &BoundsConfig,
) -> Replanned {
    let anchor = goal.coords.phi;
    let mut inverted = false;
    let mut interval = |centre: f64, half: f64, min_width: f64| {
        target_interval(centre, half, min_width).unwrap_or_else(|_| {
            inverted = true;
            (centre - 0.5 * min_width, centre + 0.5 * min_width)
        })
    };
    let targets_p = [
        interval(goal.coords.perp1, goal.half_widths[0], cfg.min_width_position),
        interval(goal.coords.perp2, goal.half_widths[1], cfg.min_width_position),
    ];
    let targets_o = [
        interval(goal.orientation[0], cfg.orientation_half_width, cfg.min_width_orientation),
        interval(goal.orientation[1], cfg.orientation_half_width, cfg.min_width_orientation),
    ];
    let pair = |p: &BoundPair, (lo, hi): (f64, f64)| BoundPair {
        lower: replan_one(&p.lower, phi_r, phi0, anchor, lo),
        upper: replan_one(&p.upper, phi_r, phi0, anchor, hi),
    };
    Replanned {
        bounds: BoundSet {
            position: [pair(&prev.position[0], targets_p[0]), pair(&prev.position[1], targets_p[1])],
            orientation: [pair(&prev.orientation[0], targets_o[0]), pair(&prev.orientation[1], targets_o[1])],
        },
        inverted,
    }
}
