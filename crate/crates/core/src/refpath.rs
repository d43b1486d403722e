//! Piecewise-linear position and orientation reference paths.
//!
//! Each segment carries a right-handed orthonormal frame for decomposing
//! position errors (`b_p1`, `b_p2`, tangent) and one for orientation errors
//! (`b_o1`, `b_o2`, `b_omega`). The path parameter is arc length in meters.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::so3::{exp_map, log_map, rpy_from_rotation};

const MIN_SEGMENT_LENGTH: f64 = 1e-6;
const NO_ROTATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    pub phi_start: f64,
    pub length: f64,
    pub p_start: Vector3<f64>,
    pub p_end: Vector3<f64>,
    /// Orientations at the segment ends as rotation vectors.
    pub o_start: Vector3<f64>,
    pub o_end: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub b_p1: Vector3<f64>,
    pub b_p2: Vector3<f64>,
    pub b_omega: Vector3<f64>,
    pub b_o1: Vector3<f64>,
    pub b_o2: Vector3<f64>,
}

impl PathSegment {
    pub fn phi_end(&self) -> f64 {
        self.phi_start + self.length
    }

    /// Rate of change of the orientation rotation vector with respect to phi.
    pub fn orientation_rate(&self) -> Vector3<f64> {
        (self.o_end - self.o_start) / self.length
    }

    /// Projection frame whose columns are `(b_o2 | b_omega | b_o1)`.
    pub fn orientation_frame(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.b_o2, self.b_omega, self.b_o1])
    }

    fn position_at(&self, phi: f64) -> Vector3<f64> {
        self.p_start + self.tangent * (phi - self.phi_start)
    }

    fn orientation_at(&self, phi: f64) -> Vector3<f64> {
        self.o_start + self.orientation_rate() * (phi - self.phi_start)
    }
}

/// A pose expressed in path coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathCoordinates {
    pub perp1: f64,
    pub perp2: f64,
    pub phi: f64,
}

/// Result of [`ReferencePath::project_point`]; `within_segment` is false when
/// the projected parameter lies outside the segment's own range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub coords: PathCoordinates,
    pub within_segment: bool,
}

/// Error split into the two orthogonal components and the tangential one.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecomposedError {
    pub perp1: f64,
    pub perp2: f64,
    pub parallel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    segments: Vec<PathSegment>,
    /// Allowed linear extrapolation of the last segment beyond its end.
    extension: f64,
}

/// Unit vector along the component of `preferred` orthogonal to `axis`,
/// falling back to the global x axis when `preferred` is parallel to it.
fn orthogonal_direction(axis: &Vector3<f64>, preferred: &Vector3<f64>) -> Vector3<f64> {
    let v = preferred - axis * axis.dot(preferred);
    if v.norm() > 1e-6 {
        return v.normalize();
    }
    let x = Vector3::x();
    let v = x - axis * axis.dot(&x);
    v.normalize()
}

fn position_basis(tangent: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let b1 = orthogonal_direction(tangent, &Vector3::z());
    let b2 = tangent.cross(&b1);
    (b1, b2)
}

/// Smallest rotation taking `from` onto `to` (both unit vectors).
fn aligning_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to);
    if s < 1e-12 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        let perp = orthogonal_direction(from, &Vector3::z());
        return exp_map(&(perp * std::f64::consts::PI));
    }
    exp_map(&(axis / s * s.atan2(c)))
}

impl ReferencePath {
    /// Builds a path through `points` with orientations `orientations`
    /// (rotation vectors, one per point).
    pub fn from_via_points(points: &[Vector3<f64>], orientations: &[Vector3<f64>]) -> Result<Self> {
        if points.len() < 2 || points.len() != orientations.len() {
            return Err(Error::DimensionMismatch { expected: points.len().max(2), got: orientations.len() });
        }
        let mut segments = Vec::with_capacity(points.len() - 1);
        let mut phi = 0.0;
        for k in 0..points.len() - 1 {
            let delta = points[k + 1] - points[k];
            let length = delta.norm();
            if length <= MIN_SEGMENT_LENGTH {
                return Err(Error::DegenerateSegment { index: k });
            }
            let tangent = delta / length;
            let (b_p1, b_p2) = position_basis(&tangent);
            let rot = orientations[k + 1] - orientations[k];
            let b_omega = if rot.norm() > NO_ROTATION { rot.normalize() } else { tangent };
            let b_o1 = orthogonal_direction(&b_omega, &Vector3::z());
            let b_o2 = b_omega.cross(&b_o1);
            segments.push(PathSegment {
                phi_start: phi,
                length,
                p_start: points[k],
                p_end: points[k + 1],
                o_start: orientations[k],
                o_end: orientations[k + 1],
                tangent,
                b_p1,
                b_p2,
                b_omega,
                b_o1,
                b_o2,
            });
            phi += length;
        }
        Ok(Self { segments, extension: 0.0 })
    }

    /// Two-segment handover path `p_r0 -> p_ra -> p_ho0`.
    ///
    /// The start orientation is `r_r0`; the approach point and the handover
    /// location share the goal orientation, whose tool z axis points along
    /// `hand_direction` and which is otherwise as close as possible to `r_r0`.
    pub fn build_handover(
        p_r0: Vector3<f64>,
        p_ra: Vector3<f64>,
        p_ho0: Vector3<f64>,
        r_r0: &Matrix3<f64>,
        hand_direction: &Vector3<f64>,
    ) -> Result<Self> {
        let dir = hand_direction.normalize();
        let tool_z: Vector3<f64> = r_r0.column(2).into_owned();
        let goal = aligning_rotation(&tool_z, &dir) * r_r0;
        let o0 = log_map(r_r0)?;
        let og = log_map(&goal)?;
        Self::from_via_points(&[p_r0, p_ra, p_ho0], &[o0, og, og])
    }

    pub fn with_extension(mut self, extension: f64) -> Self {
        self.extension = extension.max(0.0);
        self
    }

    pub fn extension(&self) -> f64 {
        self.extension
    }

    pub fn segments(&self) -> &[PathSegment] {
        &self.segments
    }

    pub fn last_segment_index(&self) -> usize {
        self.segments.len() - 1
    }

    pub fn phi_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.phi_end())
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_end() + self.extension
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.segments.iter().map(|s| s.phi_start).collect();
        v.push(self.phi_end());
        v
    }

    fn check_range(&self, phi: f64) -> Result<()> {
        if !(phi >= 0.0 && phi <= self.phi_max()) {
            return Err(Error::OutOfRange { value: phi, min: 0.0, max: self.phi_max() });
        }
        Ok(())
    }

    /// Index of the segment active at `phi`; breakpoints belong to the later
    /// segment, parameters past the end to the last one.
    pub fn segment_index(&self, phi: f64) -> usize {
        self.segments
            .iter()
            .rposition(|s| phi >= s.phi_start)
            .unwrap_or(0)
    }

    pub fn segment_at(&self, phi: f64) -> &PathSegment {
        &self.segments[self.segment_index(phi)]
    }

    /// Position and orientation (rotation vector) of the path at `phi`.
    pub fn eval(&self, phi: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        self.check_range(phi)?;
        let seg = self.segment_at(phi);
        Ok((seg.position_at(phi), seg.orientation_at(phi)))
    }

    pub fn decompose_position_error(&self, p: &Vector3<f64>, phi: f64) -> Result<DecomposedError> {
        let (pi_p, _) = self.eval(phi)?;
        let seg = self.segment_at(phi);
        let e = p - pi_p;
        Ok(DecomposedError { perp1: seg.b_p1.dot(&e), perp2: seg.b_p2.dot(&e), parallel: seg.tangent.dot(&e) })
    }

    /// Orientation error `Log(R Exp(pi_o)^T)` expressed as yaw, roll and pitch
    /// of the error rotation in the frame `(b_o2 | b_omega | b_o1)`, returned
    /// as `(perp1, perp2, parallel)`.
    pub fn decompose_orientation_error(&self, r: &Matrix3<f64>, phi: f64) -> Result<DecomposedError> {
        let (_, pi_o) = self.eval(phi)?;
        let seg = self.segment_at(phi);
        orientation_error_in_frame(r, &pi_o, &seg.orientation_frame())
    }

    /// Orthogonal projection onto the (infinitely extended) line of `segment`.
    pub fn project_point(&self, x: &Vector3<f64>, segment: usize) -> Projection {
        let seg = &self.segments[segment];
        let along = (x - seg.p_start).dot(&seg.tangent);
        let phi = seg.phi_start + along;
        let e = x - seg.position_at(phi);
        let within = along >= -1e-12 && along <= seg.length + 1e-12;
        Projection {
            coords: PathCoordinates { perp1: seg.b_p1.dot(&e), perp2: seg.b_p2.dot(&e), phi },
            within_segment: within,
        }
    }

    /// `[b_p1 b_p2]^T Sigma [b_p1 b_p2]`.
    pub fn project_covariance(&self, sigma: &Matrix3<f64>, segment: usize) -> Result<Matrix2<f64>> {
        check_psd3(sigma)?;
        let seg = &self.segments[segment];
        let b = nalgebra::Matrix3x2::from_columns(&[seg.b_p1, seg.b_p2]);
        let out = b.transpose() * sigma * b;
        Ok(0.5 * (out + out.transpose()))
    }
}

/// Shared by path decomposition and hand-orientation projection.
pub(crate) fn orientation_error_in_frame(
    r: &Matrix3<f64>,
    reference: &Vector3<f64>,
    frame: &Matrix3<f64>,
) -> Result<DecomposedError> {
    let r_err = r * exp_map(reference).transpose();
    log_map(&r_err)?;
    let r_rpy = frame.transpose() * r_err * frame;
    let rpy = rpy_from_rotation(&r_rpy)?;
    Ok(DecomposedError { perp1: rpy.yaw, perp2: rpy.roll, parallel: rpy.pitch })
}

fn check_psd3(sigma: &Matrix3<f64>) -> Result<()> {
    let asym = (sigma - sigma.transpose()).abs().max();
    let eig = (0.5 * (sigma + sigma.transpose())).symmetric_eigenvalues();
    let min = eig.min();
    if asym > 1e-10 || min < -1e-10 || !min.is_finite() {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{rot_y, rot_z, RpyAngles};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn l_path() -> ReferencePath {
        ReferencePath::from_via_points(
            &[Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)],
            &[Vector3::zeros(), Vector3::new(0.0, 0.4, 0.0), Vector3::new(0.0, 0.4, 0.3)],
        )
        .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    fn random_path(rng: &mut ChaCha8Rng) -> ReferencePath {
        let pts: Vec<Vector3<f64>> =
            (0..3).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let ors: Vec<Vector3<f64>> = (0..3).map(|_| random_unit(rng) * rng.gen_range(0.0..1.5)).collect();
        ReferencePath::from_via_points(&pts, &ors).unwrap()
    }

    fn orthonormal(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
        let m = Matrix3::from_columns(&[*a, *b, *c]);
        (m.transpose() * m - Matrix3::identity()).abs().max()
    }

    #[test]
    fn axis_aligned_breakpoints_and_tangents() {
        let p = l_path();
        assert_eq!(p.breakpoints(), vec![0.0, 1.0, 2.0]);
        assert_eq!(p.segments()[0].tangent, Vector3::z());
        assert_eq!(p.segments()[1].tangent, Vector3::x());
    }

    #[test]
    fn eval_endpoints_and_midpoint() {
        let p = l_path();
        assert_eq!(p.eval(0.0).unwrap().0, Vector3::zeros());
        assert_eq!(p.eval(1.0).unwrap().0, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(p.eval(2.0).unwrap().0, Vector3::new(1.0, 0.0, 1.0));
        let (pm, om) = p.eval(1.5).unwrap();
        assert!((pm - Vector3::new(0.5, 0.0, 1.0)).norm() < 1e-15);
        assert!((om - Vector3::new(0.0, 0.4, 0.15)).norm() < 1e-15);
        assert!(matches!(p.eval(2.1), Err(Error::OutOfRange { .. })));
        assert!(matches!(p.eval(-0.1), Err(Error::OutOfRange { .. })));
        let ext = p.clone().with_extension(0.2);
        assert!((ext.eval(2.1).unwrap().0 - Vector3::new(1.1, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn continuity_at_breakpoints() {
        let p = l_path();
        let s0 = &p.segments()[0];
        assert_eq!(s0.position_at(s0.phi_end()), p.segments()[1].p_start);
    }

    #[test]
    fn degenerate_segment() {
        let r = ReferencePath::from_via_points(
            &[Vector3::zeros(), Vector3::zeros(), Vector3::x()],
            &[Vector3::zeros(); 3],
        );
        assert_eq!(r.unwrap_err(), Error::DegenerateSegment { index: 0 });
    }

    #[test]
    fn bases_orthonormal_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_path(&mut rng);
            for s in p.segments() {
                assert!(orthonormal(&s.tangent, &s.b_p1, &s.b_p2) < 1e-10);
                assert!(orthonormal(&s.b_omega, &s.b_o1, &s.b_o2) < 1e-10);
                assert!((s.orientation_frame().determinant() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vertical_tangent_falls_back_to_x() {
        let path = l_path();
        let s = &path.segments()[0];
        assert!((s.b_p1 - Vector3::x()).norm() < 1e-15);
    }

    #[test]
    fn position_decomposition() {
        let p = l_path();
        let phi = 1.3;
        let (on, _) = p.eval(phi).unwrap();
        let e = p.decompose_position_error(&on, phi).unwrap();
        assert_eq!(e, DecomposedError::default());
        let seg = p.segment_at(phi).clone();
        let e = p.decompose_position_error(&(on + 0.1 * seg.b_p1), phi).unwrap();
        assert!((e.perp1 - 0.1).abs() < 1e-15 && e.perp2.abs() < 1e-15 && e.parallel.abs() < 1e-15);
    }

    #[test]
    fn position_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let path = random_path(&mut rng);
            let phi = rng.gen_range(0.0..path.phi_end());
            let x = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let e = path.decompose_position_error(&x, phi).unwrap();
            let s = path.segment_at(phi);
            let recon = path.eval(phi).unwrap().0 + e.perp1 * s.b_p1 + e.perp2 * s.b_p2 + e.parallel * s.tangent;
            assert!((recon - x).norm() < 1e-12);
        }
    }

    #[test]
    fn orientation_decomposition_zero_and_tangential() {
        let p = l_path();
        let phi = 1.4;
        let (_, o) = p.eval(phi).unwrap();
        let r = exp_map(&o);
        let e = p.decompose_orientation_error(&r, phi).unwrap();
        assert!(e.perp1.abs() < 1e-12 && e.perp2.abs() < 1e-12 && e.parallel.abs() < 1e-12);
        let b_omega = p.segment_at(phi).b_omega;
        let r = exp_map(&(0.2 * b_omega)) * exp_map(&o);
        let e = p.decompose_orientation_error(&r, phi).unwrap();
        assert!((e.parallel - 0.2).abs() < 1e-12 && e.perp1.abs() < 1e-12 && e.perp2.abs() < 1e-12);
    }

    #[test]
    fn orientation_recomposition_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let path = random_path(&mut rng);
            let phi = rng.gen_range(0.0..path.phi_end());
            let err = random_unit(&mut rng) * rng.gen_range(0.0..0.5);
            let (_, o) = path.eval(phi).unwrap();
            let r_err = exp_map(&err);
            let e = path.decompose_orientation_error(&(r_err * exp_map(&o)), phi).unwrap();
            let frame = path.segment_at(phi).orientation_frame();
            let r_rpy = RpyAngles::new(e.perp2, e.parallel, e.perp1).to_rotation();
            let recon = frame * r_rpy * frame.transpose();
            assert!((recon - r_err).abs().max() < 1e-9);
        }
    }

    #[test]
    fn projection_axis_aligned() {
        let mut p = ReferencePath::from_via_points(&[Vector3::zeros(), Vector3::x()], &[Vector3::zeros(); 2]).unwrap();
        p.segments[0].b_p1 = Vector3::y();
        p.segments[0].b_p2 = Vector3::z();
        let pr = p.project_point(&Vector3::new(0.6, 0.1, -0.05), 0);
        assert!((pr.coords.perp1 - 0.1).abs() < 1e-15);
        assert!((pr.coords.perp2 + 0.05).abs() < 1e-15);
        assert!((pr.coords.phi - 0.6).abs() < 1e-15);
        assert!(pr.within_segment);
        let on = p.project_point(&Vector3::new(0.3, 0.0, 0.0), 0);
        assert_eq!((on.coords.perp1, on.coords.perp2), (0.0, 0.0));
        assert!(!p.project_point(&Vector3::new(1.3, 0.0, 0.0), 0).within_segment);
    }

    #[test]
    fn projection_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let path = random_path(&mut rng);
            let k = rng.gen_range(0..2);
            let x = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let pr = path.project_point(&x, k).coords;
            let s = &path.segments()[k];
            let base = s.p_start + s.tangent * (pr.phi - s.phi_start);
            assert!((base + pr.perp1 * s.b_p1 + pr.perp2 * s.b_p2 - x).norm() < 1e-12);
            if pr.phi >= s.phi_start && pr.phi < s.phi_end() {
                let e = path.decompose_position_error(&x, pr.phi).unwrap();
                assert!(e.parallel.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_projection() {
        let p = ReferencePath::from_via_points(&[Vector3::zeros(), Vector3::x()], &[Vector3::zeros(); 2]).unwrap();
        let sigma = Matrix3::from_diagonal(&Vector3::new(0.01, 0.04, 0.09));
        let out = p.project_covariance(&sigma, 0).unwrap();
        // b_p1 = z, b_p2 = x × z = -y.
        assert!((out - Matrix2::new(0.09, 0.0, 0.0, 0.04)).abs().max() < 1e-15);
        assert_eq!(p.project_covariance(&Matrix3::zeros(), 0).unwrap(), Matrix2::zeros());
        let bad = Matrix3::from_diagonal(&Vector3::new(-1.0, 0.0, 0.0));
        assert!(matches!(p.project_covariance(&bad, 0), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn covariance_projection_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let path = random_path(&mut rng);
            let a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let sigma = a * a.transpose();
            let s = &path.segments()[1];
            let out = path.project_covariance(&sigma, 1).unwrap();
            let bases = [s.b_p1, s.b_p2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            acc += bases[i][r] * sigma[(r, c)] * bases[j][c];
                        }
                    }
                    assert!((out[(i, j)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn handover_path_goal_orientation() {
        let r0 = rot_y(2.3) * rot_z(0.2);
        let p = ReferencePath::build_handover(
            Vector3::new(0.3, 0.0, 0.5),
            Vector3::new(0.45, 0.05, 0.45),
            Vector3::new(0.75, 0.05, 0.45),
            &r0,
            &Vector3::x(),
        )
        .unwrap();
        let (_, og) = p.eval(p.phi_end()).unwrap();
        let rg = exp_map(&og);
        assert!((rg.column(2) - Vector3::x()).norm() < 1e-12);
        // Goal is at least as close to the start as any other rotation with the same approach axis.
        let d0 = log_map(&(rg * r0.transpose())).unwrap().norm();
        for k in 0..36 {
            let alt = rg * rot_z(k as f64 * 0.17);
            let d = log_map(&(alt * r0.transpose())).map(|v| v.norm()).unwrap_or(std::f64::consts::PI);
            assert!(d0 <= d + 1e-12);
        }
        // The last segment carries no rotation, so its orientation frame follows the position frame.
        let last = &p.segments()[1];
        assert_eq!(last.b_omega, last.tangent);
    }
}
