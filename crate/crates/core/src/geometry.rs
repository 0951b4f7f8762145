//! Pinhole cameras, Plücker rays and the weighted multiview line intersection.
//!
//! Poses are world-from-camera: `rotation` maps camera-frame directions into
//! the world frame and `center` is the camera center in world coordinates.
//! Pixels are measured from the top-left corner, `u` to the right and `v`
//! downward, and the camera looks along its +z axis.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::linalg::{Mat3, Vec3};
use crate::{Error, Result};

pub type WorldPoint = Vec3;

/// Bundles whose normal matrix has `σ_min / σ_max` below this are rejected.
pub const DEGENERACY_THRESHOLD: f64 = 1e-6;

const ROTATION_TOLERANCE: f64 = 1e-9;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::input("intrinsics must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::input(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    rotation: Mat3,
    center: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3) -> Result<Self> {
        if !rotation.is_finite() || !center.is_finite() {
            return Err(Error::input("pose must be finite"));
        }
        let err = rotation.orthonormality_error();
        if err > ROTATION_TOLERANCE {
            return Err(Error::input(format!(
                "rotation is not orthonormal (max |RRᵀ-I| = {err:e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::input("rotation determinant is not +1"));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::IDENTITY,
            center: Vec3::ZERO,
        }
    }

    /// Converts a camera-from-world extrinsic `x_cam = R x_world + t`.
    pub fn from_camera_from_world(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rt = rotation.transpose();
        Self::new(rt, -rt.mul_vec(translation))
    }

    /// Camera placed at `center` with its optical axis pointing at `target`.
    /// `up` fixes the roll; image `v` grows against it.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - center;
        if forward.norm() == 0.0 {
            return Err(Error::input("look_at target coincides with center"));
        }
        let z = forward * (1.0 / forward.norm());
        let x = z.cross(up);
        if x.norm() < 1e-12 {
            return Err(Error::input("look_at up vector parallel to view direction"));
        }
        let x = x * (1.0 / x.norm());
        let y = z.cross(x);
        Self::new(Mat3::from_columns(x, y, z), center)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    /// `(R_cw, t_cw)` with `x_cam = R_cw x_world + t_cw`.
    pub fn camera_from_world(&self) -> (Mat3, Vec3) {
        let r = self.rotation.transpose();
        (r, -r.mul_vec(self.center))
    }

    pub fn world_to_camera(&self, p: WorldPoint) -> Vec3 {
        self.rotation.transpose().mul_vec(p - self.center)
    }

    pub fn camera_to_world_direction(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }
}

/// One calibrated image: a view observed at a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub view_id: String,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl CameraView {
    /// Forward pinhole projection; `None` for points not in front of the camera.
    pub fn project(&self, p: WorldPoint) -> Option<(f64, f64)> {
        project(&self.intrinsics, &self.pose, p)
    }

    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<PluckerRay> {
        pixel_to_ray(&self.intrinsics, &self.pose, u, v)
    }
}

pub fn project(intr: &CameraIntrinsics, pose: &CameraPose, p: WorldPoint) -> Option<(f64, f64)> {
    let c = pose.world_to_camera(p);
    if c.z <= 0.0 {
        return None;
    }
    Some((intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy))
}

/// Oriented line through `origin` along unit `direction`, with its moment
/// `origin × direction`. The pair `(direction, moment)` is the 6-D Plücker
/// descriptor; the origin is kept for triangulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluckerRay {
    direction: Vec3,
    moment: Vec3,
    origin: Vec3,
}

impl PluckerRay {
    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn moment(&self) -> Vec3 {
        self.moment
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// `[d; m]`
    pub fn descriptor(&self) -> [f64; 6] {
        let d = self.direction;
        let m = self.moment;
        [d.x, d.y, d.z, m.x, m.y, m.z]
    }

    pub fn point_at(&self, t: f64) -> WorldPoint {
        self.origin + self.direction * t
    }

    /// Applies `x ↦ R x + t` to the line.
    pub fn transformed(&self, rotation: &Mat3, translation: Vec3) -> Result<PluckerRay> {
        make_plucker(
            rotation.mul_vec(self.origin) + translation,
            rotation.mul_vec(self.direction),
        )
    }
}

pub fn make_plucker(origin: Vec3, direction: Vec3) -> Result<PluckerRay> {
    if !origin.is_finite() || !direction.is_finite() {
        return Err(Error::input("ray origin and direction must be finite"));
    }
    let n = direction.norm();
    if n == 0.0 {
        return Err(Error::input("zero-length ray direction"));
    }
    let direction = direction * (1.0 / n);
    Ok(PluckerRay {
        direction,
        moment: origin.cross(direction),
        origin,
    })
}

pub fn pixel_to_ray(intr: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64) -> Result<PluckerRay> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::input(format!("non-finite pixel ({u}, {v})")));
    }
    let cam = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    make_plucker(pose.center(), pose.camera_to_world_direction(cam))
}

/// `‖(I − d dᵀ)(p − o)‖₂`
pub fn point_to_ray_distance(p: WorldPoint, ray: &PluckerRay) -> f64 {
    let w = p - ray.origin;
    (w - ray.direction * ray.direction.dot(w)).norm()
}

/// Value of `Σ α_r ‖(I − d_r d_rᵀ)(p − o_r)‖²`.
pub fn weighted_ray_objective(p: WorldPoint, rays: &[PluckerRay], weights: &[f64]) -> f64 {
    rays.iter()
        .zip(weights)
        .map(|(r, &w)| {
            let d = point_to_ray_distance(p, r);
            w * d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayIntersection {
    pub point: WorldPoint,
    /// `σ_min / σ_max` of the weighted normal matrix.
    pub condition: f64,
}

/// Normal equations `A p = b` of the weighted intersection.
pub(crate) fn normal_system(rays: &[PluckerRay], weights: &[f64]) -> (Mat3, Vec3) {
    let mut a = Mat3::ZERO;
    let mut b = Vec3::ZERO;
    for (ray, &w) in rays.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let p = Mat3::orthogonal_projector(ray.direction);
        a = a.add(&p.scale(w));
        b += p.mul_vec(ray.origin) * w;
    }
    (a, b)
}

pub(crate) fn condition_ratio(a: &Mat3) -> f64 {
    let ev = a.symmetric_eigenvalues();
    let max = ev[2];
    if !(max > 0.0) {
        return 0.0;
    }
    ev[0].max(0.0) / max
}

/// Point minimizing the weighted sum of squared perpendicular distances to
/// the rays.
pub fn weighted_ray_intersection(rays: &[PluckerRay], weights: &[f64]) -> Result<RayIntersection> {
    if rays.is_empty() {
        return Err(Error::input("intersection needs at least one ray"));
    }
    if weights.len() != rays.len() {
        return Err(Error::dim("intersection weights", rays.len(), weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::input("intersection weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::input(format!("intersection weights sum to {total}, not 1")));
    }
    let (a, b) = normal_system(rays, weights);
    let condition = condition_ratio(&a);
    if condition < DEGENERACY_THRESHOLD {
        return Err(Error::Degenerate { condition });
    }
    let point = a
        .solve_spd(b)
        .ok_or(Error::Degenerate { condition })?;
    Ok(RayIntersection { point, condition })
}
