//! Rigid-body geometry, pinhole camera model and pose-error metrics.
//!
//! Poses are stored camera-to-world: a camera-frame point `Xc` maps to the
//! world as `X = R * Xc + t`.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_QUAT_NORM: f64 = 1e-12;
const MIN_DEPTH: f64 = 1e-8;

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose from a (w, x, y, z) quaternion, renormalizing it.
    /// Rejects near-zero quaternions.
    pub fn new(qw: f64, qx: f64, qy: f64, qz: f64, t: Vector3<f64>) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        if q.norm() < MIN_QUAT_NORM {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        Ok(Pose {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: t,
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Quaternion coefficients in (w, x, y, z) order.
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Applies the transform: camera-frame point to world.
    pub fn transform(&self, xc: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * xc + self.translation
    }

    /// Inverse transform: world point to camera frame.
    pub fn inverse_transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (x - self.translation)
    }

    pub fn invert(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Composition `(a ∘ b)(x) = a(b(x))`.
    pub fn compose(&self, b: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Rotation matrix for a (w, x, y, z) quaternion. Renormalizes internally,
/// rejects near-zero input.
pub fn quat_to_matrix(qw: f64, qx: f64, qy: f64, qz: f64) -> Result<Matrix3<f64>> {
    let q = Quaternion::new(qw, qx, qy, qz);
    if q.norm() < MIN_QUAT_NORM {
        return Err(Error::InvalidInput("zero quaternion".into()));
    }
    Ok(UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner())
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dims must be positive".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidInput(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Unit-z ray through a pixel, camera frame.
    pub fn ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Projects a camera-frame point to pixels, returning the camera depth.
pub fn project_camera(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    if xc.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: xc.z });
    }
    Ok((
        Vector2::new(
            k.fx * xc.x / xc.z + k.cx,
            k.fy * xc.y / xc.z + k.cy,
        ),
        xc.z,
    ))
}

/// Projects a world point through `pose` (camera-to-world) into pixels.
pub fn project(k: &CameraIntrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    project_camera(k, &pose.inverse_transform(x))
}

/// Lifts a pixel at a known camera depth back into the world frame.
pub fn back_project(k: &CameraIntrinsics, pose: &Pose, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    pose.transform(&(k.ray(px) * depth))
}

/// Jacobian of the pinhole projection at a camera-frame point:
/// `[[fx/z, 0, -fx*x/z^2], [0, fy/z, -fy*y/z^2]]`.
pub fn projection_jacobian(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    if xc.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: xc.z });
    }
    let z2 = xc.z * xc.z;
    Ok(Matrix2x3::new(
        k.fx / xc.z,
        0.0,
        -k.fx * xc.x / z2,
        0.0,
        k.fy / xc.z,
        -k.fy * xc.y / z2,
    ))
}

/// Translation error in meters, rotation error in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_err: f64,
    pub rotation_err: f64,
}

/// Error between two poses: Euclidean translation distance and the
/// geodesic rotation angle in degrees, clamped to [0, 180].
pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let translation_err = (estimate.translation - truth.translation).norm();
    // atan2 form is stable near zero where acos of the trace loses digits
    let dq = truth.rotation.inverse() * estimate.rotation;
    let q = dq.quaternion();
    let angle = 2.0 * q.imag().norm().atan2(q.w.abs());
    PoseError {
        translation_err,
        rotation_err: angle.to_degrees(),
    }
}

/// Parses the one-pose-per-line text format `id qw qx qy qz tx ty tz`.
pub fn parse_pose_line(line: &str) -> Result<(String, Pose)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(Error::InvalidInput(format!(
            "pose line needs 8 fields, got {}",
            fields.len()
        )));
    }
    let mut v = [0.0f64; 7];
    for (i, f) in fields[1..].iter().enumerate() {
        v[i] = f
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad number in pose line: {f}")))?;
    }
    let pose = Pose::new(v[0], v[1], v[2], v[3], Vector3::new(v[4], v[5], v[6]))?;
    Ok((fields[0].to_string(), pose))
}

pub fn format_pose_line(id: &str, pose: &Pose) -> String {
    let [qw, qx, qy, qz] = pose.quat_wxyz();
    let t = pose.translation;
    format!("{id} {qw} {qx} {qy} {qz} {} {} {}", t.x, t.y, t.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let rotation = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let translation = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 4.0;
        Pose::from_parts(rotation, translation)
    }

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn compose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        let c = Pose::identity().compose(&t);
        assert_relative_eq!(c.to_matrix(), t.to_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let c = t.invert().compose(&t);
            assert_relative_eq!(c.to_matrix(), Matrix4::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let x = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let via_pose = a.compose(&b).transform(&x);
            let m = a.to_matrix() * b.to_matrix();
            let via_matrix = (m * x.push(1.0)).xyz();
            assert_relative_eq!(via_pose, via_matrix, epsilon = 1e-9);
        }
    }

    #[test]
    fn quat_identity_and_axis() {
        let m = quat_to_matrix(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-12);

        let h = std::f64::consts::FRAC_PI_4;
        let m = quat_to_matrix(h.cos(), h.sin(), 0.0, 0.0).unwrap();
        // 90 degrees about x: y -> z.
        assert_relative_eq!(m * Vector3::y(), Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn quat_zero_rejected() {
        assert!(quat_to_matrix(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(Pose::new(0.0, 0.0, 0.0, 0.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn quat_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q: [f64; 4] = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            if (q[0].powi(2) + q[1].powi(2) + q[2].powi(2) + q[3].powi(2)).sqrt() < 1e-3 {
                continue;
            }
            let r = quat_to_matrix(q[0], q[1], q[2], q[3]).unwrap();
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-9);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn project_on_axis() {
        let k = test_camera();
        let (px, z) = project(&k, &Pose::identity(), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(50.0, 50.0), epsilon = 1e-12);
        assert_relative_eq!(z, 2.0);

        let (px, _) = project(&k, &Pose::identity(), &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(100.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = test_camera();
        assert!(matches!(
            project(&k, &Pose::identity(), &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn project_back_project_round_trip() {
        let k = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 100 {
            let pose = random_pose(&mut rng);
            let x = Vector3::new(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
            );
            let Ok((px, depth)) = project(&k, &pose, &x) else {
                continue;
            };
            let back = back_project(&k, &pose, &px, depth);
            assert_relative_eq!(back, x, epsilon = 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn jacobian_closed_form() {
        let k = test_camera();
        let j = projection_jacobian(&k, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(j, Matrix2x3::new(50.0, 0.0, 0.0, 0.0, 50.0, 0.0), epsilon = 1e-12);

        let j = projection_jacobian(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(j.row(0).transpose(), Vector3::new(50.0, 0.0, -25.0), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let xc = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 4.0 + 0.5,
            );
            let j = projection_jacobian(&k, &xc).unwrap();
            let step = 1e-5 * xc.z;
            for col in 0..3 {
                let mut hi = xc;
                let mut lo = xc;
                hi[col] += step;
                lo[col] -= step;
                let (p_hi, _) = project_camera(&k, &hi).unwrap();
                let (p_lo, _) = project_camera(&k, &lo).unwrap();
                let fd = (p_hi - p_lo) / (2.0 * step);
                let col_j = j.column(col);
                let scale = col_j.norm().max(fd.norm()).max(1e-6);
                assert!(
                    (fd - col_j).norm() / scale < 1e-5,
                    "fd {fd:?} vs analytic {col_j:?}"
                );
            }
        }
    }

    #[test]
    fn pose_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_pose(&mut rng);
        let e = pose_error(&t, &t);
        assert_relative_eq!(e.translation_err, 0.0);
        assert_relative_eq!(e.rotation_err, 0.0, epsilon = 1e-6);

        let rotated = Pose::from_parts(
            t.rotation * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2),
            t.translation,
        );
        let e = pose_error(&rotated, &t);
        assert_relative_eq!(e.translation_err, 0.0);
        assert_relative_eq!(e.rotation_err, 90.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_error_constructed_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let phi_deg = rng.gen::<f64>() * 179.0;
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
            let delta = UnitQuaternion::from_scaled_axis(axis * phi_deg.to_radians());
            let p = Pose::from_parts(t.rotation * delta, t.translation);
            let e = pose_error(&p, &t);
            assert!((e.rotation_err - phi_deg).abs() < 1e-6, "{} vs {phi_deg}", e.rotation_err);
            // symmetric in rotation
            let e2 = pose_error(&t, &p);
            assert_relative_eq!(e.rotation_err, e2.rotation_err, epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_line_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_pose(&mut rng);
        let line = format_pose_line("frame-007", &p);
        let (id, parsed) = parse_pose_line(&line).unwrap();
        assert_eq!(id, "frame-007");
        assert_relative_eq!(parsed.to_matrix(), p.to_matrix(), epsilon = 1e-12);
    }
}
