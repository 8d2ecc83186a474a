//! Camera mathematics: perspective frustum, frustum maximum dimensions,
//! pinhole intrinsics, depth packing and the depth linearization that turns a
//! packed depth-buffer value back into a camera-space point.
//!
//! Conventions:
//!
//! * Camera space is OpenGL style: +x right, +y up, the camera looks down -z.
//! * A pixel index `(F_x, F_y)` maps to NDC through its center:
//!   `x_ndc = 2(F_x + 0.5)/W - 1`, `y_ndc = 1 - 2(F_y + 0.5)/H`.
//! * Continuous image coordinates `(u, v)` put pixel `k` on `[k, k + 1)`, so
//!   `u = F_x + 0.5`. The pinhole intrinsics work in these coordinates.
//! * The depth buffer holds window depth `z01 = (z_ndc + 1)/2`, which is
//!   non-linear in camera distance. Linearization happens in
//!   [`Unprojector`].
//! * Point clouds use the "depth-forward" frame: x right, y up and z equal
//!   to the (positive) distance along the viewing axis.

use nalgebra::{Matrix3, Matrix4, Vector4};
use thiserror::Error;

use crate::pose::{Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid frustum: {0}")]
    InvalidFrustum(String),
    #[error("normalized depth {0} outside [0, 1)")]
    DomainError(f64),
    #[error("projection is singular (|w| = {0:e})")]
    SingularProjection(f64),
    #[error("stereo baseline must be non-negative, got {0}")]
    NegativeBaseline(f64),
}

/// 2^24, the scale of the three significant depth bytes.
const DEPTH_SCALE: f64 = 16_777_216.0;

/// Perspective view volume of a simulated camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frustum {
    near: f64,
    far: f64,
    fva: f64,
    width: u32,
    height: u32,
}

impl Frustum {
    pub fn new(near: f64, far: f64, fva: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        if !(near > 0.0 && near.is_finite()) {
            return Err(CameraError::InvalidFrustum(format!("near must be > 0, got {near}")));
        }
        if !(far > near && far.is_finite()) {
            return Err(CameraError::InvalidFrustum(format!(
                "far ({far}) must exceed near ({near})"
            )));
        }
        if !(fva > 0.0 && fva < std::f64::consts::PI) {
            return Err(CameraError::InvalidFrustum(format!(
                "vertical field-view angle must be in (0, pi), got {fva}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidFrustum("image size must be non-zero".into()));
        }
        Ok(Self {
            near,
            far,
            fva,
            width,
            height,
        })
    }

    pub fn near(&self) -> f64 {
        self.near
    }
    pub fn far(&self) -> f64 {
        self.far
    }
    /// Vertical field-view angle, radians.
    pub fn fva(&self) -> f64 {
        self.fva
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn with_size(&self, width: u32, height: u32) -> Result<Self, CameraError> {
        Self::new(self.near, self.far, self.fva, width, height)
    }

    /// Standard right-handed perspective matrix, depth mapped to [-1, 1].
    pub fn projection_matrix(&self) -> Matrix4<f64> {
        let c = 1.0 / (self.fva / 2.0).tan();
        let (n, f) = (self.near, self.far);
        Matrix4::new(
            c / self.aspect(), 0.0, 0.0, 0.0,
            0.0, c, 0.0, 0.0,
            0.0, 0.0, (f + n) / (n - f), 2.0 * f * n / (n - f),
            0.0, 0.0, -1.0, 0.0,
        )
    }

    /// Pixel index to NDC (through the pixel center).
    pub fn pixel_to_ndc(&self, fx: f64, fy: f64) -> (f64, f64) {
        (
            2.0 * (fx + 0.5) / self.width as f64 - 1.0,
            1.0 - 2.0 * (fy + 0.5) / self.height as f64,
        )
    }

    /// Projects a camera-space (OpenGL) point through the frustum matrix.
    /// Returns the fractional pixel index `(F_x, F_y)` and window depth
    /// `z01`, or `None` for points at or behind the camera plane.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64, f64)> {
        let clip = self.projection_matrix() * Vector4::new(p_cam.x, p_cam.y, p_cam.z, 1.0);
        if clip.w <= 1e-12 {
            return None;
        }
        let ndc = clip.xyz() / clip.w;
        let fx = (ndc.x + 1.0) * self.width as f64 / 2.0 - 0.5;
        let fy = (1.0 - ndc.y) * self.height as f64 / 2.0 - 0.5;
        Some((fx, fy, (ndc.z + 1.0) / 2.0))
    }

    /// Window depth of a point at camera distance `depth` (positive).
    pub fn window_depth(&self, depth: f64) -> f64 {
        let (n, f) = (self.near, self.far);
        let z_ndc = (f + n) / (f - n) - 2.0 * f * n / ((f - n) * depth);
        (z_ndc + 1.0) / 2.0
    }

    /// Direction (in camera space) of the ray through a pixel index, scaled
    /// so that its -z component is exactly 1: a point at ray parameter `t`
    /// lies at camera distance `t`.
    pub fn pixel_ray(&self, fx: f64, fy: f64) -> Vec3 {
        let (xn, yn) = self.pixel_to_ndc(fx, fy);
        let t = (self.fva / 2.0).tan();
        Vec3::new(xn * t * self.aspect(), yn * t, -1.0)
    }
}

/// Maximum frustum dimensions used to normalize and rescale point clouds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxDims {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// `MD_x = 2 f tan(fva/2)`, `MD_y = MD_x · AR`, `MD_z = f - n`.
///
/// Note `MD_x` is computed from the vertical angle, so for `AR > 1` it is the
/// smaller extent. Normalized x coordinates of in-frustum points therefore
/// span `0.5 ± AR/2` rather than `[0, 1]`; the rescale step inverts the map
/// exactly either way.
pub fn max_dims(fr: &Frustum) -> MaxDims {
    let x = 2.0 * fr.far * (fr.fva / 2.0).tan();
    MaxDims {
        x,
        y: x * fr.aspect(),
        z: fr.far - fr.near,
    }
}

/// Pinhole intrinsics with a centered principal point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-space (OpenGL) point to continuous image
    /// coordinates `(u, v)`, v pointing down.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        let d = -p_cam.z;
        if d <= 0.0 {
            return None;
        }
        Some((self.fx * p_cam.x / d + self.cx, self.cy - self.fy * p_cam.y / d))
    }
}

pub fn intrinsics(fr: &Frustum) -> Intrinsics {
    let f = fr.height as f64 / (2.0 * (fr.fva / 2.0).tan());
    Intrinsics {
        fx: f,
        fy: f,
        cx: fr.width as f64 / 2.0,
        cy: fr.height as f64 / 2.0,
    }
}

/// Depth value packed into four one-byte channels, least significant first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PackedDepth(pub [u8; 4]);

pub fn pack_depth(z01: f64) -> Result<PackedDepth, CameraError> {
    if !(0.0..1.0).contains(&z01) {
        return Err(CameraError::DomainError(z01));
    }
    // Values within half a step of 1.0 would round up to 2^24 and overflow
    // into B3; clamp to the largest representable value instead.
    let z = ((z01 * DEPTH_SCALE).round() as u32).min((1 << 24) - 1);
    Ok(PackedDepth([
        (z & 0xff) as u8,
        ((z >> 8) & 0xff) as u8,
        ((z >> 16) & 0xff) as u8,
        0,
    ]))
}

pub fn unpack_depth(p: PackedDepth) -> f64 {
    let [b0, b1, b2, b3] = p.0.map(u32::from);
    let z = (b3 << 24) | (b2 << 16) | (b1 << 8) | b0;
    z as f64 / DEPTH_SCALE
}

/// Output of the linearization step: camera-space coordinates normalized by
/// the frustum maximum dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl NormalizedPoint {
    /// Marker for pixels without a hit.
    pub const INVALID: NormalizedPoint = NormalizedPoint {
        x: f64::NAN,
        y: f64::NAN,
        z: f64::NAN,
    };

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Precomputed inverse projection for repeated fragment unprojection.
#[derive(Clone, Debug)]
pub struct Unprojector {
    frustum: Frustum,
    inverse: Matrix4<f64>,
    md: MaxDims,
}

impl Unprojector {
    pub fn new(fr: &Frustum) -> Self {
        let inverse = fr
            .projection_matrix()
            .try_inverse()
            .expect("a valid frustum has an invertible projection");
        Self {
            frustum: *fr,
            inverse,
            md: max_dims(fr),
        }
    }

    /// Camera-space (OpenGL) point behind a fragment.
    pub fn camera_point(&self, fx: f64, fy: f64, z01: f64) -> Result<Vec3, CameraError> {
        let (xn, yn) = self.frustum.pixel_to_ndc(fx, fy);
        let p_norm = Vector4::new(xn, yn, 2.0 * z01 - 1.0, 1.0);
        let p_clip = self.inverse * p_norm;
        if p_clip.w.abs() < 1e-12 {
            return Err(CameraError::SingularProjection(p_clip.w));
        }
        Ok(p_clip.xyz() / p_clip.w)
    }

    pub fn unproject(&self, fx: f64, fy: f64, z01: f64) -> Result<NormalizedPoint, CameraError> {
        let p = self.camera_point(fx, fy, z01)?;
        let (n, f) = (self.frustum.near, self.frustum.far);
        Ok(NormalizedPoint {
            x: (p.x + self.md.x / 2.0) / self.md.x,
            y: (p.y + self.md.y / 2.0) / self.md.y,
            // camera looks down -z; distance along the view axis is -p.z
            z: (-p.z - n) / (f - n),
        })
    }
}

pub fn unproject_fragment(
    fx: f64,
    fy: f64,
    z01: f64,
    fr: &Frustum,
) -> Result<NormalizedPoint, CameraError> {
    Unprojector::new(fr).unproject(fx, fy, z01)
}

/// Rescales a normalized point into the depth-forward camera frame (meters).
/// Invalid points map to `None`.
pub fn rescale_point(np: &NormalizedPoint, fr: &Frustum) -> Option<Vec3> {
    if !np.is_valid() {
        return None;
    }
    let md = max_dims(fr);
    Some(Vec3::new(
        np.x * md.x - md.x / 2.0,
        np.y * md.y - md.y / 2.0,
        fr.near + np.z * (fr.far - fr.near),
    ))
}

pub fn rescale_points(points: &[NormalizedPoint], fr: &Frustum) -> Vec<Option<Vec3>> {
    points.iter().map(|p| rescale_point(p, fr)).collect()
}

/// A posed perspective camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub frustum: Frustum,
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(frustum: Frustum, pose: Pose) -> Self {
        Self { frustum, pose }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        intrinsics(&self.frustum)
    }

    /// World-space ray through a pixel; `origin + t·dir` is at camera
    /// distance `t`.
    pub fn pixel_ray_world(&self, fx: f64, fy: f64) -> (Vec3, Vec3) {
        (self.pose.position, self.pose.rotate(&self.frustum.pixel_ray(fx, fy)))
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.pose.inverse_transform_point(p)
    }
}

/// Two rectified cameras sharing one frustum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    pub baseline: f64,
}

impl StereoRig {
    /// Transform taking left-camera coordinates to right-camera coordinates.
    pub fn right_from_left(&self) -> Pose {
        self.right.pose.inverse().compose(&self.left.pose)
    }
}

pub fn build_stereo_rig(center: &Pose, fr: &Frustum, baseline: f64) -> Result<StereoRig, CameraError> {
    if !(baseline >= 0.0) {
        return Err(CameraError::NegativeBaseline(baseline));
    }
    let half = Pose::from_translation(Vec3::new(baseline / 2.0, 0.0, 0.0));
    let left = center.compose(&half.inverse());
    let right = center.compose(&half);
    Ok(StereoRig {
        left: CameraModel::new(*fr, left),
        right: CameraModel::new(*fr, right),
        baseline,
    })
}

/// Camera parameters as streamed alongside each frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraInfo {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub fva: f64,
    pub baseline: f64,
    pub right_from_left: Pose,
}

impl CameraInfo {
    pub fn from_rig(rig: &StereoRig) -> Self {
        let fr = rig.left.frustum;
        let k = intrinsics(&fr);
        Self {
            width: fr.width,
            height: fr.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            near: fr.near,
            far: fr.far,
            fva: fr.fva,
            baseline: rig.baseline,
            right_from_left: rig.right_from_left(),
        }
    }
}
