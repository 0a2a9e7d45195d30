use nalgebra::{Matrix3, Vector3};

use super::cloud::{Point, PointCloud};
use crate::error::{invalid_input, Result};

const ORTHO_TOL: f64 = 1e-9;
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix of `omega`, so that `hat(a) * b == a.cross(&b)`.
pub fn hat(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Exponential map from a rotation vector (rad) to a rotation matrix.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        // second-order Taylor expansion
        return Matrix3::identity() + w + w2 * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + w * a + w2 * b
}

/// Rigid transform `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(invalid_input("pose has non-finite entries"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(invalid_input(format!("rotation is not orthonormal (error {err:.3e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(invalid_input(format!("rotation determinant is {det}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rotation_vector(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: so3_exp(&omega), translation }
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_rotation_vector(Vector3::new(0.0, 0.0, yaw), translation)
    }

    /// Parses 12 row-major `[R | t]` values. Rotations within 1e-4 of
    /// orthonormal (e.g. printed with limited precision) are projected back
    /// onto SO(3).
    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        match Self::new(rotation, translation) {
            Ok(p) => Ok(p),
            Err(e) => {
                let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
                if !err.is_finite() || err > 1e-4 || rotation.determinant() <= 0.0 {
                    return Err(e);
                }
                let svd = rotation.svd(true, true);
                let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
                Self::new(u * vt, translation)
            }
        }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, //
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, //
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        Point::from(self.rotation * p.coords + self.translation)
    }

    /// Left-multiplies by a pure rotation and adds a translation offset:
    /// `exp(hat(omega)) * self`, then `t += dt`.
    pub fn perturbed(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        let r = so3_exp(omega);
        Pose {
            rotation: r * self.rotation,
            translation: r * self.translation + dt,
        }
    }
}

/// Applies `pose` to every point; attributes are preserved.
pub fn transform(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    cloud.map_points(|p| pose.apply(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Rodrigues' rotation of a single vector: independent of the matrix form.
    fn rodrigues(axis_angle: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
        let theta = axis_angle.norm();
        if theta == 0.0 {
            return *v;
        }
        let k = axis_angle / theta;
        v * theta.cos() + k.cross(v) * theta.sin() + k * k.dot(v) * (1.0 - theta.cos())
    }

    fn ortho_error(r: &Matrix3<f64>) -> f64 {
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_yaw_matches_rodrigues() {
        let omega = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let r = so3_exp(&omega);
        let v = Vector3::new(1.0, 0.0, 0.0);
        let got = r * v;
        let want = rodrigues(&omega, &v);
        assert!((got - want).abs().max() < 1e-12);
        assert!((got - Vector3::new(0.0, 1.0, 0.0)).abs().max() < 1e-12);
    }

    #[test]
    fn transform_examples() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(transform(&cloud, &Pose::identity()), cloud);

        let shifted = transform(&cloud, &Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(shifted.point(0), &Point::new(1.0, 0.0, 0.0));

        let yaw = Pose::from_yaw(FRAC_PI_2, Vector3::zeros());
        let unit = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]]).unwrap();
        let rotated = transform(&unit, &yaw);
        let want = rodrigues(&Vector3::new(0.0, 0.0, FRAC_PI_2), &Vector3::x());
        assert!((rotated.point(0).coords - want).abs().max() < 1e-12);
    }

    #[test]
    fn small_angle_branch_is_orthonormal() {
        let r = so3_exp(&Vector3::new(3e-9, -2e-9, 1e-9));
        assert!(ortho_error(&r) < 1e-15);
        let r2 = so3_exp(&(Vector3::new(3e-9, -2e-9, 1e-9) * 1.01));
        assert!((r - r2).abs().max() < 1e-10);
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
        let p = Pose::from_rotation_vector(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let back = Pose::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(back, p);
        // limited-precision rows are re-orthonormalized
        let mut rows = p.to_row_major();
        for v in rows.iter_mut() {
            *v = (*v * 1e6).round() / 1e6;
        }
        let q = Pose::from_row_major(&rows).unwrap();
        assert!(ortho_error(q.rotation()) < 1e-12);
    }

    proptest! {
        #[test]
        fn exp_inverse_property(x in -1.8f64..1.8, y in -1.8f64..1.8, z in -1.8f64..1.8) {
            let omega = Vector3::new(x, y, z);
            prop_assume!(omega.norm() <= std::f64::consts::PI);
            let r = so3_exp(&omega);
            let prod = r * so3_exp(&-omega);
            prop_assert!((prod - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!(ortho_error(&r) < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let v = Vector3::new(0.3, -1.2, 2.0);
            prop_assert!((r * v - rodrigues(&omega, &v)).abs().max() < 1e-12);
        }

        #[test]
        fn transform_roundtrip(
            wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -5.0f64..5.0,
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -10.0f64..10.0), 1..40),
        ) {
            let pose = Pose::from_rotation_vector(Vector3::new(wx, wy, wz), Vector3::new(tx, ty, tz));
            let coords: Vec<[f64; 3]> = pts.iter().map(|&(a, b, c)| [a, b, c]).collect();
            let cloud = PointCloud::from_xyz(&coords).unwrap();
            let back = transform(&transform(&cloud, &pose), &pose.inverse());
            for (a, b) in cloud.points().iter().zip(back.points()) {
                prop_assert!((a - b).abs().max() < 1e-9);
            }
        }
    }
}
