//! Handover goal estimation: GPR prediction of the handover location, its
//! projection into path coordinates and the blend toward the measured hand.

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::HandoverModel;
use crate::refpath::{orientation_error_in_frame, PathCoordinates, ReferencePath};

/// Measured hand state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanObservation {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub t: f64,
}

impl HumanObservation {
    pub fn gp_input(&self) -> [f64; 6] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
        ]
    }
}

/// Predicted handover location distribution in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandoverPrediction {
    pub mean: Vector3<f64>,
    /// Diagonal: the axis models are independent.
    pub covariance: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorParams {
    pub alpha_p: f64,
    pub d_p: f64,
    pub alpha_o: f64,
    pub d_o: f64,
    /// Multiplier on the standard deviations when sizing the uncertainty box.
    pub confidence_scale: f64,
}

impl Default for PredictorParams {
    fn default() -> Self {
        Self { alpha_p: 10.0, d_p: 2.0, alpha_o: 10.0, d_o: 2.0, confidence_scale: 2.0 }
    }
}

impl PredictorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_p", self.alpha_p), ("alpha_o", self.alpha_o), ("confidence_scale", self.confidence_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation { field: format!("predictor.{name}"), message: "must be positive".into() });
            }
        }
        for (name, v) in [("d_p", self.d_p), ("d_o", self.d_o)] {
            if !v.is_finite() {
                return Err(Error::Validation { field: format!("predictor.{name}"), message: "must be finite".into() });
            }
        }
        Ok(())
    }
}

/// Handover goal in path coordinates after blending prediction and measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptedHandoverGoal {
    pub coords: PathCoordinates,
    /// Half-widths of the uncertainty box along `b_p1` and `b_p2`.
    pub half_widths: [f64; 2],
    /// Target orthogonal orientation errors.
    pub orientation: [f64; 2],
    pub w_pred: f64,
    pub d_pred: f64,
    /// Projection of the measured hand.
    pub hand: PathCoordinates,
    /// Projection of the predicted mean.
    pub predicted: PathCoordinates,
    /// Set when the blended goal fell outside the handover segment and was clamped.
    pub clamped: bool,
}

pub fn predict_handover_location(model: &HandoverModel, obs: &HumanObservation) -> HandoverPrediction {
    let x = obs.gp_input();
    let mut mean = Vector3::zeros();
    let mut var = Vector3::zeros();
    for (j, m) in model.axes.iter().enumerate() {
        let (mu, v) = m.predict(&x);
        mean[j] = mu;
        var[j] = v;
    }
    HandoverPrediction { mean, covariance: Matrix3::from_diagonal(&var) }
}

/// `1/2 + 1/2 tanh(alpha * d_pred - d)`.
pub fn prediction_weight(d_pred: f64, alpha: f64, d: f64) -> f64 {
    0.5 + 0.5 * (alpha * d_pred - d).tanh()
}

/// Half-widths of the smallest axis-aligned box around an ellipse with half
/// axes `r1`, `r2`, the first rotated by `theta` from the horizontal axis.
pub fn ellipse_box_from_axes(r1: f64, r2: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    ((r1 * r1 * c * c + r2 * r2 * s * s).sqrt(), (r1 * r1 * s * s + r2 * r2 * c * c).sqrt())
}

/// Box around the `confidence_scale`-sigma ellipse of a 2x2 covariance.
pub fn ellipse_bounding_box(sigma: &Matrix2<f64>, confidence_scale: f64) -> Result<(f64, f64)> {
    let asym = (sigma[(0, 1)] - sigma[(1, 0)]).abs();
    let eig = sigma.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if asym > 1e-10 || min < -1e-10 || !min.is_finite() {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let r1 = confidence_scale * eig.eigenvalues[0].max(0.0).sqrt();
    let r2 = confidence_scale * eig.eigenvalues[1].max(0.0).sqrt();
    let v = eig.eigenvectors.column(0);
    let theta = v[1].atan2(v[0]);
    Ok(ellipse_box_from_axes(r1, r2, theta))
}

/// Blends the projected prediction with the projected hand position.
pub fn adapt_goal(
    pred: &HandoverPrediction,
    obs: &HumanObservation,
    path: &ReferencePath,
    params: &PredictorParams,
) -> Result<AdaptedHandoverGoal> {
    let seg_idx = path.last_segment_index();
    let seg = &path.segments()[seg_idx];
    let predicted = path.project_point(&pred.mean, seg_idx).coords;
    let hand = path.project_point(&obs.position, seg_idx).coords;
    let d_pred = hand.phi - predicted.phi;
    let w = prediction_weight(d_pred, params.alpha_p, params.d_p);
    let blend = |a: f64, b: f64| w * a + (1.0 - w) * b;
    let mut coords = PathCoordinates {
        perp1: blend(predicted.perp1, hand.perp1),
        perp2: blend(predicted.perp2, hand.perp2),
        phi: blend(predicted.phi, hand.phi),
    };
    let mut clamped = false;
    if coords.phi < seg.phi_start || coords.phi > path.phi_max() {
        coords.phi = coords.phi.clamp(seg.phi_start, path.phi_max());
        clamped = true;
    }
    let sigma_phi = path.project_covariance(&pred.covariance, seg_idx)?;
    let (x1, x2) = ellipse_bounding_box(&sigma_phi, params.confidence_scale)?;
    let orientation = adapt_orientation_goal(obs, path, params, d_pred)?;
    Ok(AdaptedHandoverGoal {
        coords,
        half_widths: [w * x1, w * x2],
        orientation,
        w_pred: w,
        d_pred,
        hand,
        predicted,
        clamped,
    })
}

/// Orthogonal orientation errors of the hand relative to the end of the
/// path, faded in as the hand approaches.
pub fn adapt_orientation_goal(
    obs: &HumanObservation,
    path: &ReferencePath,
    params: &PredictorParams,
    d_pred: f64,
) -> Result<[f64; 2]> {
    let (e1, e2) = hand_orientation_errors(obs, path)?;
    let fade = 1.0 - prediction_weight(d_pred, params.alpha_o, params.d_o);
    Ok([fade * e1, fade * e2])
}

/// Unscaled orthogonal orientation errors of the hand.
pub fn hand_orientation_errors(obs: &HumanObservation, path: &ReferencePath) -> Result<(f64, f64)> {
    let seg = &path.segments()[path.last_segment_index()];
    let e = orientation_error_in_frame(&obs.rotation, &seg.o_end, &seg.orientation_frame())?;
    Ok((e.perp1, e.perp2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::{Hyperparameters, TrainingSet};
    use crate::so3::exp_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Pitch just short of pi/2, not at it.
    #[allow(clippy::approx_constant)]
    fn path() -> ReferencePath {
        ReferencePath::from_via_points(
            &[Vector3::new(0.3, 0.0, 0.6), Vector3::new(0.4, 0.0, 0.4), Vector3::new(0.8, 0.0, 0.4)],
            &[Vector3::new(0.0, 2.4, 0.0), Vector3::new(0.0, 1.5708, 0.0), Vector3::new(0.0, 1.5708, 0.0)],
        )
        .unwrap()
        .with_extension(0.5)
    }

    fn obs(p: Vector3<f64>, r: Matrix3<f64>) -> HumanObservation {
        HumanObservation { position: p, velocity: Vector3::zeros(), rotation: r, t: 0.0 }
    }

    #[test]
    fn weight_values() {
        assert_eq!(prediction_weight(0.4, 5.0, 2.0), 0.5);
        assert!((prediction_weight(0.0, 5.0, 2.0) - 0.017986).abs() < 1e-6);
        assert!((prediction_weight(0.0, 5.0, 2.0) - 0.5 * (1.0 + (-2.0f64).tanh())).abs() < 1e-15);
        assert!(prediction_weight(1e3, 5.0, 2.0) > 1.0 - 1e-12);
    }

    #[test]
    fn box_axis_aligned_circle_and_rotated() {
        assert_eq!(ellipse_box_from_axes(2.0, 1.0, 0.0), (2.0, 1.0));
        let (a, b) = ellipse_box_from_axes(0.7, 0.7, 1.234);
        assert!((a - 0.7).abs() < 1e-15 && (b - 0.7).abs() < 1e-15);
        let (a, b) = ellipse_box_from_axes(2.0, 1.0, 30f64.to_radians());
        assert!((a - 1.802776).abs() < 1e-6);
        assert!((b - 1.322876).abs() < 1e-6);
    }

    #[test]
    fn box_from_covariance() {
        // r = (2, 1) at 30 degrees with confidence scale 1.
        let th = 30f64.to_radians();
        let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let sigma = rot * Matrix2::new(4.0, 0.0, 0.0, 1.0) * rot.transpose();
        let (a, b) = ellipse_bounding_box(&sigma, 1.0).unwrap();
        assert!((a - 1.802776).abs() < 1e-6 && (b - 1.322876).abs() < 1e-6);
        assert!(matches!(ellipse_bounding_box(&Matrix2::new(-1.0, 0.0, 0.0, 1.0), 1.0), Err(Error::NotPsd { .. })));
        assert_eq!(ellipse_bounding_box(&Matrix2::zeros(), 2.0).unwrap(), (0.0, 0.0));
    }

    fn goal_rotation(p: &ReferencePath) -> Matrix3<f64> {
        exp_map(&p.segments()[1].o_end)
    }

    #[test]
    fn adapt_goal_pure_prediction_and_measurement() {
        let p = path();
        let pred = HandoverPrediction {
            mean: Vector3::new(0.7, 0.05, 0.42),
            covariance: Matrix3::from_diagonal(&Vector3::new(1e-3, 4e-4, 9e-4)),
        };
        let params = PredictorParams::default();
        // Hand far beyond the goal: w -> 1.
        let far = adapt_goal(&pred, &obs(Vector3::new(3.0, 0.0, 0.4), goal_rotation(&p)), &p, &params).unwrap();
        assert!(far.w_pred > 1.0 - 1e-9);
        assert!((far.coords.phi - far.predicted.phi).abs() < 1e-8);
        let sigma_phi = p.project_covariance(&pred.covariance, 1).unwrap();
        let (x1, x2) = ellipse_bounding_box(&sigma_phi, 2.0).unwrap();
        assert!((far.half_widths[0] - x1).abs() < 1e-8 && (far.half_widths[1] - x2).abs() < 1e-8);
        assert!(far.orientation[0].abs() < 1e-8);
        // Hand far before the goal: w -> 0.
        let near = adapt_goal(&pred, &obs(Vector3::new(0.45, 0.01, 0.41), goal_rotation(&p)), &p, &params).unwrap();
        assert!(near.w_pred < 2e-4);
        assert!((near.coords.phi - near.hand.phi).abs() < 1e-4);
        assert!(near.half_widths[0] < 1e-5);
    }

    #[test]
    fn adapt_goal_midpoint_at_half_weight() {
        let p = path();
        let params = PredictorParams { alpha_p: 5.0, d_p: 2.0, ..Default::default() };
        let pred = HandoverPrediction { mean: Vector3::new(0.7, 0.03, 0.45), covariance: Matrix3::zeros() };
        // d_pred = 0.4 exactly: hand projection 0.4 m further along the last segment (tangent +x).
        let hand = Vector3::new(1.1, -0.02, 0.38);
        let g = adapt_goal(&pred, &obs(hand, goal_rotation(&p)), &p, &params).unwrap();
        assert!((g.d_pred - 0.4).abs() < 1e-12);
        assert!((g.w_pred - 0.5).abs() < 1e-12);
        assert!((g.coords.phi - 0.5 * (g.predicted.phi + g.hand.phi)).abs() < 1e-12);
        assert!((g.coords.perp1 - 0.5 * (g.predicted.perp1 + g.hand.perp1)).abs() < 1e-12);
        assert!((g.coords.perp2 - 0.5 * (g.predicted.perp2 + g.hand.perp2)).abs() < 1e-12);
    }

    #[test]
    fn adapt_goal_is_convex_combination() {
        let p = path();
        let params = PredictorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mean = Vector3::new(rng.gen_range(0.5..0.9), rng.gen_range(-0.1..0.1), rng.gen_range(0.3..0.5));
            let hand = Vector3::new(rng.gen_range(0.5..1.5), rng.gen_range(-0.2..0.2), rng.gen_range(0.2..0.6));
            let pred = HandoverPrediction { mean, covariance: Matrix3::identity() * 1e-3 };
            let g = adapt_goal(&pred, &obs(hand, goal_rotation(&p)), &p, &params).unwrap();
            let between = |x: f64, a: f64, b: f64| x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12;
            assert!(between(g.coords.perp1, g.predicted.perp1, g.hand.perp1));
            assert!(between(g.coords.perp2, g.predicted.perp2, g.hand.perp2));
            if !g.clamped {
                assert!(between(g.coords.phi, g.predicted.phi, g.hand.phi));
            }
        }
    }

    #[test]
    fn orientation_goal() {
        let p = path();
        let params = PredictorParams { alpha_o: 5.0, d_o: 2.0, ..Default::default() };
        let rg = goal_rotation(&p);
        let at_end = adapt_orientation_goal(&obs(Vector3::zeros(), rg), &p, &params, 0.0).unwrap();
        assert!(at_end[0].abs() < 1e-12 && at_end[1].abs() < 1e-12);
        let seg = &p.segments()[1];
        let tilted = exp_map(&(0.2 * seg.b_o1 - 0.1 * seg.b_o2)) * rg;
        let o = obs(Vector3::zeros(), tilted);
        let (e1, e2) = hand_orientation_errors(&o, &p).unwrap();
        let g = adapt_orientation_goal(&o, &p, &params, 0.0).unwrap();
        assert!((g[0] - 0.982014 * e1).abs() < 1e-6 && (g[1] - 0.982014 * e2).abs() < 1e-6);
        let far = adapt_orientation_goal(&o, &p, &params, 10.0).unwrap();
        assert!(far[0].abs() < 1e-12 && far[1].abs() < 1e-12);
    }

    #[test]
    fn prediction_assembly() {
        let set = TrainingSet {
            inputs: vec![[0.9, 0.1, 0.4, 0.0, 0.0, 0.0]],
            goals: vec![[0.7, 0.05, 0.45]],
        };
        let hp = Hyperparameters { noise_variance: 0.0, ..Default::default() };
        let model = HandoverModel::fit(&set, &hp).unwrap();
        let o = HumanObservation {
            position: Vector3::new(0.9, 0.1, 0.4),
            velocity: Vector3::zeros(),
            rotation: Matrix3::identity(),
            t: 0.0,
        };
        let pred = predict_handover_location(&model, &o);
        assert!((pred.mean - Vector3::new(0.7, 0.05, 0.45)).norm() < 1e-12);
        assert!(pred.covariance.abs().max() < 1e-12);
        for j in 0..3 {
            assert_eq!(pred.mean[j], model.axes[j].predict(&o.gp_input()).0);
        }
        let far = HumanObservation { position: Vector3::new(50.0, 0.0, 0.0), ..o };
        let pf = predict_handover_location(&model, &far);
        assert!((pf.covariance.diagonal() - Vector3::repeat(hp.signal_variance)).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weight_monotone_and_bounded(a in -5.0f64..5.0, b in -5.0f64..5.0, alpha in 0.1f64..20.0, d in -3.0f64..3.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let wl = prediction_weight(lo, alpha, d);
                let wh = prediction_weight(hi, alpha, d);
                prop_assert!(wl <= wh);
                prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wh));
            }
        }
    }
}
