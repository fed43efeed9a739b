//! Rigid transforms between the camera, leveled camera-reference and road
//! frames, plus pinhole projection.
//!
//! Axis conventions:
//!
//! * `Camera`: X right, Y down, Z forward (optical axis).
//! * `CameraReference`: same origin as the camera, leveled (zero roll and
//!   pitch); X right, Y vertical pointing down, Z horizontal forward.
//! * `Road`: origin `camera_height` below the camera-reference origin;
//!   X lateral (right), Y longitudinal (forward), Z up. Elevation is the road
//!   Z coordinate.
//!
//! The camera-to-reference rotation applies pitch about the lateral axis
//! first, then roll about the longitudinal axis. Positive pitch tilts the
//! optical axis downwards.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default vertical distance between the camera-reference and road planes.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.10;

/// Points closer than this along the optical axis are never valid projections.
pub const PROJECTION_Z_MIN: f64 = 0.1;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameTag {
    Camera,
    CameraReference,
    Road,
}

/// An SE(3) transform `p -> R p + t` from `source` to `target` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    source: FrameTag,
    target: FrameTag,
}

impl RigidPose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        source: FrameTag,
        target: FrameTag,
    ) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(residual < ORTHONORMAL_TOL) {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal (|R^T R - I|_inf = {residual:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() < ORTHONORMAL_TOL) {
            return Err(Error::Domain(format!("rotation determinant {det} is not 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
            source,
            target,
        })
    }

    pub fn identity(frame: FrameTag) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            source: frame,
            target: frame,
        }
    }

    pub fn translation_only(t: Vector3<f64>, source: FrameTag, target: FrameTag) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
            source,
            target,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn source(&self) -> FrameTag {
        self.source
    }

    pub fn target(&self) -> FrameTag {
        self.target
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            source: self.target,
            target: self.source,
        }
    }

    /// Applies the transform to a single point without frame checks.
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction vector (no translation).
    #[inline]
    pub fn apply_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Maximum absolute entry-wise deviation from the identity transform.
    pub fn identity_deviation(&self) -> f64 {
        let r = (self.rotation - Matrix3::identity()).abs().max();
        let t = self.translation.abs().max();
        r.max(t)
    }
}

/// `outer ∘ inner`: first apply `inner`, then `outer`.
pub fn compose(outer: &RigidPose, inner: &RigidPose) -> Result<RigidPose> {
    if inner.target != outer.source {
        return Err(Error::FrameMismatch {
            expected: outer.source,
            actual: inner.target,
        });
    }
    Ok(RigidPose {
        rotation: outer.rotation * inner.rotation,
        translation: outer.rotation * inner.translation + outer.translation,
        source: inner.source,
        target: outer.target,
    })
}

/// Camera -> camera-reference rotation for the given IMU attitude.
pub fn rotation_from_roll_pitch(roll: f64, pitch: f64) -> Result<RigidPose> {
    let limit = std::f64::consts::FRAC_PI_2;
    if !(roll.abs() < limit) || !(pitch.abs() < limit) {
        return Err(Error::Domain(format!(
            "roll {roll} and pitch {pitch} must lie strictly within (-pi/2, pi/2)"
        )));
    }
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    // forward (0,0,1) -> (0, sin p, cos p): the optical axis dips below the horizon
    #[rustfmt::skip]
    let pitch_m = Matrix3::new(
        1.0, 0.0, 0.0,
        0.0,  cp,  sp,
        0.0, -sp,  cp,
    );
    #[rustfmt::skip]
    let roll_m = Matrix3::new(
         cr, -sr, 0.0,
         sr,  cr, 0.0,
        0.0, 0.0, 1.0,
    );
    Ok(RigidPose {
        rotation: roll_m * pitch_m,
        translation: Vector3::zeros(),
        source: FrameTag::Camera,
        target: FrameTag::CameraReference,
    })
}

/// Camera-reference -> road transform for a camera mounted `camera_height`
/// metres above the road reference plane.
pub fn reference_to_road(camera_height: f64) -> RigidPose {
    #[rustfmt::skip]
    let axes = Matrix3::new(
        1.0, 0.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, -1.0, 0.0,
    );
    RigidPose {
        rotation: axes,
        translation: Vector3::new(0.0, 0.0, camera_height),
        source: FrameTag::CameraReference,
        target: FrameTag::Road,
    }
}

/// Full camera -> road chain.
pub fn camera_to_road(roll: f64, pitch: f64, camera_height: f64) -> Result<RigidPose> {
    let cam_to_ref = rotation_from_roll_pitch(roll, pitch)?;
    compose(&reference_to_road(camera_height), &cam_to_ref)
}

/// A batch of 3D points expressed in a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    pub frame: FrameTag,
    pub points: Vec<Vector3<f64>>,
}

impl PointBatch {
    pub fn new(frame: FrameTag, points: Vec<Vector3<f64>>) -> Self {
        Self { frame, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn transform_points(batch: &PointBatch, pose: &RigidPose) -> Result<PointBatch> {
    if batch.frame != pose.source {
        return Err(Error::FrameMismatch {
            expected: pose.source,
            actual: batch.frame,
        });
    }
    Ok(PointBatch {
        frame: pose.target,
        points: batch.points.iter().map(|p| pose.apply(p)).collect(),
    })
}

/// Pinhole intrinsics plus the stereo baseline (0 for monocular rigs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
}

impl Default for CameraModel {
    /// Synthetic defaults at the 960x528 crop. Not measured on any real rig.
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 480.0,
            cy: 264.0,
            width: 960,
            height: 528,
            baseline: 0.12,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("camera.{field}"), msg));
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return bad("fx", format!("must be positive, got {}", self.fx));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("fy", format!("must be positive, got {}", self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("width", "image size must be non-zero".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx", format!("must lie in [0, {}), got {}", self.width, self.cx));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy", format!("must lie in [0, {}), got {}", self.height, self.cy));
        }
        if !(self.baseline >= 0.0 && self.baseline.is_finite()) {
            return bad("baseline", format!("must be non-negative, got {}", self.baseline));
        }
        Ok(())
    }

    /// Transform from the left camera frame into the rectified right camera
    /// frame (right camera sits `baseline` metres along +X).
    pub fn left_to_right(&self) -> RigidPose {
        RigidPose::translation_only(
            Vector3::new(-self.baseline, 0.0, 0.0),
            FrameTag::Camera,
            FrameTag::Camera,
        )
    }

    /// Projects one camera-frame point against an image of `width x height`.
    #[inline]
    pub fn project_within(&self, p: &Vector3<f64>, width: f64, height: f64) -> Projection {
        let depth = p.z;
        let u = self.fx * p.x / depth + self.cx;
        let v = self.fy * p.y / depth + self.cy;
        let valid = depth > PROJECTION_Z_MIN && u >= 0.0 && u < width && v >= 0.0 && v < height;
        Projection { u, v, depth, valid }
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        self.project_within(p, self.width as f64, self.height as f64)
    }

    /// Unit-depth ray direction (camera frame) through pixel `(u, v)`.
    #[inline]
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Projects camera-frame points. Invalid points are flagged, never dropped.
pub fn project_points(batch: &PointBatch, cam: &CameraModel) -> Result<Vec<Projection>> {
    if batch.frame != FrameTag::Camera {
        return Err(Error::FrameMismatch {
            expected: FrameTag::Camera,
            actual: batch.frame,
        });
    }
    Ok(batch.points.iter().map(|p| cam.project(p)).collect())
}
