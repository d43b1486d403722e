//! Serial-chain forward kinematics (modified Denavit-Hartenberg, revolute
//! joints only) and the geometric Jacobian of the tool frame.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{rot_x, rot_z, RpyAngles};

pub const MAX_JOINTS: usize = 16;

/// One revolute joint in Craig's modified DH convention: the link transform
/// is `RotX(alpha) TransX(a) RotZ(q + theta_offset) TransZ(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

/// Fixed transform from the last joint frame to the tool center point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolTransform {
    pub translation: [f64; 3],
    /// Roll-pitch-yaw (ZYX) of the tool frame relative to the last link.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl Default for ToolTransform {
    fn default() -> Self {
        Self { translation: [0.0, 0.0, 0.226], rpy: [0.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub joints: Vec<DhJoint>,
    #[serde(default)]
    pub tool: ToolTransform,
}

/// Box limits on joint position, velocity, acceleration and jerk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub dq_max: Vec<f64>,
    pub ddq_max: Vec<f64>,
    pub jerk_max: Vec<f64>,
}

/// Joint position, velocity and acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
    pub ddq: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, dq: DVector::zeros(n), ddq: DVector::zeros(n) }
    }
}

/// Cartesian pose of the tool center point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Default for KinematicChain {
    /// Generic 7-DoF anthropomorphic arm (spherical shoulder and wrist,
    /// 0.42 m upper arm, 0.40 m forearm).
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let j = |d: f64, alpha: f64| DhJoint { a: 0.0, d, alpha, theta_offset: 0.0 };
        Self {
            joints: vec![
                j(0.36, 0.0),
                j(0.0, -FRAC_PI_2),
                j(0.42, FRAC_PI_2),
                j(0.0, FRAC_PI_2),
                j(0.40, -FRAC_PI_2),
                j(0.0, -FRAC_PI_2),
                j(0.0, FRAC_PI_2),
            ],
            tool: ToolTransform::default(),
        }
    }
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            q_min: vec![-2.96, -2.09, -2.96, -2.09, -2.96, -2.09, -3.05],
            q_max: vec![2.96, 2.09, 2.96, 2.09, 2.96, 2.09, 3.05],
            dq_max: vec![0.96; 7],
            ddq_max: vec![4.0; 7],
            jerk_max: vec![40.0; 7],
        }
    }
}

impl JointLimits {
    pub fn n_joints(&self) -> usize {
        self.q_min.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("q_min", &self.q_min),
            ("q_max", &self.q_max),
            ("dq_max", &self.dq_max),
            ("ddq_max", &self.ddq_max),
            ("jerk_max", &self.jerk_max),
        ] {
            if v.len() != n {
                return Err(Error::Validation {
                    field: format!("limits.{name}"),
                    message: format!("expected {n} entries, got {}", v.len()),
                });
            }
        }
        for i in 0..n {
            if !(self.q_min[i] < self.q_max[i]) {
                return Err(Error::Validation {
                    field: "limits.q_min".into(),
                    message: format!("joint {i}: lower limit must be below upper limit"),
                });
            }
            for (name, v) in [("dq_max", &self.dq_max), ("ddq_max", &self.ddq_max), ("jerk_max", &self.jerk_max)] {
                if !(v[i] > 0.0) {
                    return Err(Error::Validation {
                        field: format!("limits.{name}"),
                        message: format!("joint {i}: must be positive"),
                    });
                }
            }
        }
        Ok(())
    }
}

struct Frame {
    rotation: Matrix3<f64>,
    origin: Vector3<f64>,
}

impl KinematicChain {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 || n > MAX_JOINTS {
            return Err(Error::Validation {
                field: "robot.chain.joints".into(),
                message: format!("need 1..={MAX_JOINTS} joints, got {n}"),
            });
        }
        let finite = self
            .joints
            .iter()
            .all(|j| j.a.is_finite() && j.d.is_finite() && j.alpha.is_finite() && j.theta_offset.is_finite())
            && self.tool.translation.iter().chain(self.tool.rpy.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation {
                field: "robot.chain".into(),
                message: "non-finite parameter".into(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.joints.len() {
            return Err(Error::DimensionMismatch { expected: self.joints.len(), got: q.len() });
        }
        Ok(())
    }

    /// Joint frames (axis = third column of the rotation) followed by the tool.
    fn frames(&self, q: &[f64]) -> (Vec<Frame>, Pose) {
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        let mut frames = Vec::with_capacity(self.joints.len());
        for (joint, &qi) in self.joints.iter().zip(q) {
            let rx = rot_x(joint.alpha);
            pos += rot * Vector3::new(joint.a, 0.0, 0.0);
            rot = rot * rx * rot_z(qi + joint.theta_offset);
            pos += rot * Vector3::new(0.0, 0.0, joint.d);
            frames.push(Frame { rotation: rot, origin: pos });
        }
        let t = Vector3::from(self.tool.translation);
        let tool_rot = RpyAngles::new(self.tool.rpy[0], self.tool.rpy[1], self.tool.rpy[2]).to_rotation();
        let pose = Pose { position: pos + rot * t, rotation: rot * tool_rot };
        (frames, pose)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose> {
        self.check_dim(q)?;
        Ok(self.frames(q).1)
    }

    /// 6 x n geometric Jacobian: linear velocity rows on top of angular rows,
    /// both expressed in the base frame.
    pub fn geometric_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(q)?;
        let (frames, pose) = self.frames(q);
        Ok(jacobian_from_frames(&frames, &pose))
    }

    /// Pose and Jacobian in one pass.
    pub fn pose_and_jacobian(&self, q: &[f64]) -> Result<(Pose, DMatrix<f64>)> {
        self.check_dim(q)?;
        let (frames, pose) = self.frames(q);
        let jac = jacobian_from_frames(&frames, &pose);
        Ok((pose, jac))
    }
}

fn jacobian_from_frames(frames: &[Frame], pose: &Pose) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(6, frames.len());
    for (i, f) in frames.iter().enumerate() {
        let axis: Vector3<f64> = f.rotation.column(2).into_owned();
        let lin = axis.cross(&(pose.position - f.origin));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{is_rotation, vee};
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn planar() -> KinematicChain {
        KinematicChain {
            joints: vec![
                DhJoint { a: 0.0, d: 0.0, alpha: 0.0, theta_offset: 0.0 },
                DhJoint { a: 1.0, d: 0.0, alpha: 0.0, theta_offset: 0.0 },
            ],
            tool: ToolTransform { translation: [1.0, 0.0, 0.0], rpy: [0.0; 3] },
        }
    }

    #[test]
    fn planar_straight_and_bent() {
        let c = planar();
        let p = c.forward_kinematics(&[0.0, 0.0]).unwrap().position;
        assert!((p - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
        let p = c.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap().position;
        assert!((p - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn planar_jacobian_analytic() {
        let j = planar().geometric_jacobian(&[0.0, 0.0]).unwrap();
        assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert!((j[(1, 0)] - 2.0).abs() < 1e-15 && (j[(1, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(j.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        // Angular part: both axes along z.
        assert_eq!(j[(5, 0)], 1.0);
        assert_eq!(j[(5, 1)], 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let err = planar().forward_kinematics(&[0.0]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, got: 1 });
    }

    /// Homogeneous 4x4 product written out independently of `frames`.
    fn homogeneous_fk(chain: &KinematicChain, q: &[f64]) -> Matrix4<f64> {
        let mut t = Matrix4::<f64>::identity();
        for (j, &qi) in chain.joints.iter().zip(q) {
            let (sa, ca) = j.alpha.sin_cos();
            let (st, ct) = (qi + j.theta_offset).sin_cos();
            #[rustfmt::skip]
            let link = Matrix4::new(
                ct, -st, 0.0, j.a,
                st * ca, ct * ca, -sa, -sa * j.d,
                st * sa, ct * sa, ca, ca * j.d,
                0.0, 0.0, 0.0, 1.0,
            );
            t *= link;
        }
        let mut tool = Matrix4::identity();
        let r = RpyAngles::new(chain.tool.rpy[0], chain.tool.rpy[1], chain.tool.rpy[2]).to_rotation();
        tool.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        tool[(0, 3)] = chain.tool.translation[0];
        tool[(1, 3)] = chain.tool.translation[1];
        tool[(2, 3)] = chain.tool.translation[2];
        t * tool
    }

    #[test]
    fn default_chain_zero_configuration_matches_matrix_product() {
        let chain = KinematicChain::default();
        let q = [0.0; 7];
        let pose = chain.forward_kinematics(&q).unwrap();
        let t = homogeneous_fk(&chain, &q);
        let p = Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]);
        assert!((pose.position - p).norm() < 1e-12);
        assert!((pose.rotation - t.fixed_view::<3, 3>(0, 0)).abs().max() < 1e-12);
        // Straight up: 0.36 + 0.42 + 0.40 + 0.226.
        assert!((pose.position - Vector3::new(0.0, 0.0, 1.406)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences_random() {
        let chain = KinematicChain::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let q: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (pose, jac) = chain.pose_and_jacobian(&q).unwrap();
            assert!(is_rotation(&pose.rotation, 1e-9));
            for i in 0..7 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let fp = chain.forward_kinematics(&qp).unwrap();
                let fm = chain.forward_kinematics(&qm).unwrap();
                let dp = (fp.position - fm.position) / (2.0 * h);
                let dr = (fp.rotation - fm.rotation) / (2.0 * h);
                let w = vee(&(dr * pose.rotation.transpose()));
                for k in 0..3 {
                    assert!((dp[k] - jac[(k, i)]).abs() < 1e-6);
                    assert!((w[k] - jac[(3 + k, i)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn angular_column_is_joint_axis() {
        let chain = KinematicChain::default();
        let q = [0.3, -0.5, 0.2, -1.2, 0.4, 0.9, -0.1];
        let jac = chain.geometric_jacobian(&q).unwrap();
        let t = homogeneous_fk(&KinematicChain { joints: chain.joints[..3].to_vec(), tool: ToolTransform { translation: [0.0; 3], rpy: [0.0; 3] } }, &q[..3]);
        for k in 0..3 {
            assert!((jac[(3 + k, 2)] - t[(k, 2)]).abs() < 1e-12);
        }
    }

    #[test]
    fn validation() {
        let mut c = KinematicChain::default();
        assert!(c.validate().is_ok());
        c.joints.clear();
        assert!(c.validate().is_err());
        let mut l = JointLimits::default();
        assert!(l.validate(7).is_ok());
        l.dq_max[2] = -1.0;
        assert!(l.validate(7).is_err());
    }
}
