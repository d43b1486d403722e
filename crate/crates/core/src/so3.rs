//! Rotation group helpers: exponential/logarithm maps, roll-pitch-yaw angles and
//! the left Jacobian used when linearizing orientation errors.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Below this angle the closed-form maps switch to their series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Margin on `trace(R) = -1` at which the logarithm is rejected.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
const TRACE_SLACK: f64 = 1e-12;

/// Threshold on `|cos(pitch)|` for roll-pitch-yaw extraction.
pub const GIMBAL_MARGIN: f64 = 1e-6;

/// Roll, pitch and yaw in the ZYX convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RpyAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl RpyAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        rot_z(self.yaw) * rot_y(self.pitch) * rot_x(self.roll)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rodrigues' formula. Exact for every finite input; `exp_map(0) = I`.
pub fn exp_map(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = hat(v);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * k + b * k2
    }
}

/// Principal logarithm with angle in `[0, pi)`.
///
/// Rotations with `trace <= -1 + NEAR_PI_MARGIN` are rejected with
/// [`Error::AngleNearPi`]: the axis sign is ambiguous there. A rotation by
/// `pi - 1e-3` sits on that threshold to within rounding, so the comparison
/// allows a few ulps of slack.
pub fn log_map(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let trace = r.trace();
    if trace <= -1.0 + NEAR_PI_MARGIN - TRACE_SLACK {
        return Err(Error::AngleNearPi { trace });
    }
    let skew = 0.5 * vee(&(r - r.transpose()));
    let sin_theta = skew.norm();
    let cos_theta = (0.5 * (trace - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return Ok(skew * (1.0 + theta * theta / 6.0));
    }
    if cos_theta > 0.0 {
        return Ok(skew * (theta / sin_theta));
    }
    // Large angles: the skew part loses precision, recover the axis from
    // the symmetric part (1 - cos) n n^T instead.
    let sym = 0.5 * (r + r.transpose()) - Matrix3::identity() * cos_theta;
    let diag = sym.diagonal();
    let col = diag.imax();
    let mut axis: Vector3<f64> = sym.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// ZYX roll-pitch-yaw angles; fails near gimbal lock.
pub fn rpy_from_rotation(r: &Matrix3<f64>) -> Result<RpyAngles> {
    let cos_pitch = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    if cos_pitch < GIMBAL_MARGIN {
        return Err(Error::GimbalLock { cos_pitch });
    }
    Ok(RpyAngles {
        roll: r[(2, 1)].atan2(r[(2, 2)]),
        pitch: (-r[(2, 0)]).atan2(cos_pitch),
        yaw: r[(1, 0)].atan2(r[(0, 0)]),
    })
}

/// Maps roll-pitch-yaw rates `(droll, dpitch, dyaw)` to the spatial angular
/// velocity of `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rpy_rate_matrix(rpy: &RpyAngles) -> Matrix3<f64> {
    let rz = rot_z(rpy.yaw);
    let ex = rz * rot_y(rpy.pitch) * Vector3::x();
    let ey = rz * Vector3::y();
    let ez = Vector3::z();
    Matrix3::from_columns(&[ex, ey, ez])
}

/// Left Jacobian of SO(3): `Exp(v + dv) ~= Exp(J_l(v) dv) Exp(v)`.
pub fn left_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = hat(v);
    let k2 = k * k;
    if theta < 1e-5 {
        Matrix3::identity() + 0.5 * k + k2 / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + (1.0 - theta.cos()) / t2 * k
            + (theta - theta.sin()) / (t2 * theta) * k2
    }
}

/// Checks the rotation-matrix invariants (orthonormal, det +1) at `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Projects a nearly orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Truncated power series of the matrix exponential.
    fn series_exp(v: &Vector3<f64>) -> Matrix3<f64> {
        let k = hat(v);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..40 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_map(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = exp_map(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let y = r * Vector3::y();
        assert!((y - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn exp_matches_series() {
        let v = Vector3::new(0.3, -0.2, 0.1);
        let diff = (exp_map(&v) - series_exp(&v)).abs().max();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(log_map(&Matrix3::identity()).unwrap(), Vector3::zeros());
    }

    #[test]
    fn log_round_trip() {
        let v = Vector3::new(0.1, 0.2, 0.3);
        let back = log_map(&exp_map(&v)).unwrap();
        assert!((back - v).norm() < 1e-10);
    }

    #[test]
    fn log_near_pi_about_z() {
        // Axis-angle construction: cos/sin written out explicitly.
        let a = PI - 1e-3;
        let r = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
        let v = log_map(&r).unwrap();
        assert!((v.norm() - a).abs() < 1e-8);
        assert!((v.normalize() - Vector3::z()).norm() < 1e-8);
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = rot_x(PI);
        assert!(matches!(log_map(&r), Err(Error::AngleNearPi { .. })));
    }

    #[test]
    fn rpy_single_axis_and_composition() {
        assert_eq!(rpy_from_rotation(&Matrix3::identity()).unwrap(), RpyAngles::default());
        let z = rpy_from_rotation(&rot_z(0.3)).unwrap();
        assert!((z.yaw - 0.3).abs() < 1e-15 && z.roll.abs() < 1e-15 && z.pitch.abs() < 1e-15);
        let r = rot_z(0.2) * rot_y(0.1) * rot_x(-0.3);
        let a = rpy_from_rotation(&r).unwrap();
        assert!((a.roll + 0.3).abs() < 1e-12);
        assert!((a.pitch - 0.1).abs() < 1e-12);
        assert!((a.yaw - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rpy_gimbal_lock() {
        let r = rot_y(FRAC_PI_2);
        assert!(matches!(rpy_from_rotation(&r), Err(Error::GimbalLock { .. })));
    }

    #[test]
    fn rpy_rate_matrix_matches_finite_differences() {
        let rpy = RpyAngles::new(0.3, -0.4, 1.1);
        let e = rpy_rate_matrix(&rpy);
        let r0 = rpy.to_rotation();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = rpy.as_array();
            let mut b = rpy.as_array();
            a[k] += h;
            b[k] -= h;
            let ra = RpyAngles::new(a[0], a[1], a[2]).to_rotation();
            let rb = RpyAngles::new(b[0], b[1], b[2]).to_rotation();
            let dr = (ra - rb) / (2.0 * h);
            let omega = vee(&(dr * r0.transpose()));
            assert!((omega - e.column(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        for v in [Vector3::new(0.4, -0.7, 0.2), Vector3::new(1e-7, 0.0, -2e-7)] {
            let jl = left_jacobian(&v);
            let h = 1e-6;
            for k in 0..3 {
                let mut dv = Vector3::zeros();
                dv[k] = h;
                let rp = exp_map(&(v + dv));
                let rm = exp_map(&(v - dv));
                let omega = vee(&((rp - rm) / (2.0 * h) * exp_map(&v).transpose()));
                assert!((omega - jl.column(k)).norm() < 1e-8);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_vec() -> impl Strategy<Value = Vector3<f64>> {
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..(PI - 1e-3)).prop_filter_map(
                "nonzero direction",
                |(x, y, z, a)| {
                    let d = Vector3::new(x, y, z);
                    (d.norm() > 1e-3).then(|| d.normalize() * a)
                },
            )
        }

        proptest! {
            #[test]
            fn exp_log_round_trip(v in small_vec()) {
                let back = log_map(&exp_map(&v)).unwrap();
                prop_assert!((back - v).norm() <= 1e-10);
            }

            #[test]
            fn log_exp_reconstructs(v in small_vec()) {
                let r = exp_map(&v);
                prop_assert!(is_rotation(&r, 1e-9));
                let back = exp_map(&log_map(&r).unwrap());
                prop_assert!((back - r).abs().max() <= 1e-10);
            }

            #[test]
            fn rpy_round_trip(r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0) {
                let m = RpyAngles::new(r, p, y).to_rotation();
                let back = rpy_from_rotation(&m).unwrap().to_rotation();
                prop_assert!((back - m).abs().max() <= 1e-10);
            }
        }
    }
}
