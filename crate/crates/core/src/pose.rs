//! Rigid poses (position + unit quaternion) shared by every subsystem.

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;

/// World-frame pose of an object: position in meters and a unit quaternion.
///
/// The quaternion is kept in canonical form (`w >= 0`) so that two poses that
/// describe the same rotation compare equal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Builds a pose from raw quaternion components. Components that are
    /// already unit length (within 1e-12) are kept bit-for-bit so that
    /// serialized poses round-trip exactly; others are normalized.
    pub fn from_wxyz(position: Vec3, w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = Quaternion::new(w, x, y, z);
        let q = if (q.norm() - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Self::new(position, q)
    }

    /// Fixed-axis XYZ Euler angles in radians (roll about x, then pitch about
    /// y, then yaw about z, all in the parent frame).
    pub fn from_euler_xyz(position: Vec3, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(position, UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn euler_xyz(&self) -> (f64, f64, f64) {
        self.orientation.euler_angles()
    }

    /// Pose whose -z axis points from `eye` toward `target` with +y as close
    /// to `up` as possible (OpenGL camera convention).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let back = eye - target;
        Self::new(eye, UnitQuaternion::face_towards(&back, &up))
    }

    /// `self ⊗ other`: `other` expressed in `self`'s frame, lifted to the parent.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation * p
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.orientation.inverse() * (p - self.position)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.orientation * v
    }

    /// Local +x, +y, +z axes in the parent frame.
    pub fn axes(&self) -> [Vec3; 3] {
        [
            self.orientation * Vec3::x(),
            self.orientation * Vec3::y(),
            self.orientation * Vec3::z(),
        ]
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    /// `[x, y, z, qw, qx, qy, qz]`, the order used on the wire and in
    /// estimate files.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self::from_wxyz(Vec3::new(a[0], a[1], a[2]), a[3], a[4], a[5], a[6])
    }

    /// Linear interpolation of position, spherical interpolation of rotation.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        let position = self.position.lerp(&other.position, t);
        let orientation = self
            .orientation
            .try_slerp(&other.orientation, t, 1e-12)
            .unwrap_or(self.orientation);
        Pose::new(position, orientation)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Geodesic angle between the two orientations, radians in `[0, π]`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        let d = self.orientation.coords.dot(&other.orientation.coords).abs();
        2.0 * d.min(1.0).acos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn canonical_form_has_nonnegative_w() {
        let p = Pose::from_wxyz(Vec3::zeros(), -0.5, 0.5, 0.5, 0.5);
        assert!(p.orientation.w >= 0.0);
        assert_relative_eq!(p.orientation.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Pose::from_euler_xyz(Vec3::new(1.0, -2.0, 0.5), 0.3, -0.2, 1.1);
        let id = p.compose(&p.inverse());
        assert_relative_eq!(id.position.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(id.orientation.angle(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn look_at_points_minus_z_at_target() {
        let eye = Vec3::new(0.0, 0.0, 1.0);
        let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y());
        let fwd = pose.rotate(&-Vec3::z());
        assert_relative_eq!(fwd, -Vec3::z(), epsilon = 1e-12);
        let pose = Pose::look_at(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), Vec3::z());
        assert_relative_eq!(pose.rotate(&-Vec3::z()), -Vec3::x(), epsilon = 1e-12);
        assert_relative_eq!(pose.rotate(&Vec3::y()), Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn euler_round_trip() {
        let p = Pose::from_euler_xyz(Vec3::zeros(), 0.1, 0.2, 0.3);
        let (r, pi, y) = p.euler_xyz();
        assert_relative_eq!(r, 0.1, epsilon = 1e-12);
        assert_relative_eq!(pi, 0.2, epsilon = 1e-12);
        assert_relative_eq!(y, 0.3, epsilon = 1e-12);
        // yaw of 90 degrees maps +x to +y
        let p = Pose::from_euler_xyz(Vec3::zeros(), 0.0, 0.0, FRAC_PI_2);
        assert_relative_eq!(p.rotate(&Vec3::x()), Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn interpolation_endpoints() {
        let a = Pose::from_euler_xyz(Vec3::zeros(), 0.0, 0.0, 0.0);
        let b = Pose::from_euler_xyz(Vec3::new(2.0, 0.0, 0.0), 0.0, 0.0, 1.0);
        let m = a.interpolate(&b, 0.5);
        assert_relative_eq!(m.position.x, 1.0);
        assert_relative_eq!(m.angle_to(&a), 0.5, epsilon = 1e-9);
    }
}
