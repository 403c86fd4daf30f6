//! Pinhole camera model, rigid transforms, rasters and point clouds.
//!
//! Conventions used throughout the crate:
//!
//! * camera frame: `x` right, `y` down, the camera looks down `+z`;
//! * pixel `(u, v)` refers to the pixel *center*, so pixel `(cx, cy)` lies on
//!   the optical axis;
//! * depth rasters store the `z` range (not the Euclidean ray length) in units
//!   of `depth_scale` meters, with `0` meaning "no return".

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::BinaryMask;

pub type Vec3 = Vector3<f64>;

/// RGB triple in `[0, 1]`.
pub type Rgb = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{raster} is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        raster: &'static str,
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("{raster} buffer holds {found} values, expected {expected}")]
    BufferLength {
        raster: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("rotation is not a proper orthonormal matrix (error {0:e})")]
    NotARotation(f64),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("point cloud attribute `{attribute}` has {found} entries for {points} points")]
    AttributeLength {
        attribute: &'static str,
        points: usize,
        found: usize,
    },
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

/// JSON shape of a transform: row-major 3x3 rotation plus translation.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = &t.rotation;
        TransformRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: TransformRepr) -> Result<Self, Self::Error> {
        let rotation = Matrix3::from_row_slice(&r.rotation);
        // JSON round trips lose a few ulps; accept anything close and re-orthonormalize.
        let err = orthonormality_error(&rotation);
        if err > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(RigidTransform {
            rotation,
            translation: Vec3::from(r.translation),
        }
        .orthonormalized())
    }
}

/// `‖RᵀR − I‖∞`
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Build a transform, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let err = orthonormality_error(&rotation);
        if err >= 1e-9 || rotation.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Rotation from a rotation vector (axis times angle, Rodrigues).
    pub fn from_rotation_vector(omega: Vec3, translation: Vec3) -> Self {
        RigidTransform {
            rotation: *Rotation3::from_scaled_axis(omega).matrix(),
            translation,
        }
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`.
    ///
    /// The camera `y` axis points as close to `-up` as possible (image rows
    /// grow downward).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Looking along `up`; any perpendicular will do.
            let alt = if forward.x.abs() < 0.9 {
                Vec3::x()
            } else {
                Vec3::y()
            };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        RigidTransform {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        // atan2 keeps precision near 0 where acos of the trace does not
        s.atan2(self.rotation.trace() - 1.0)
    }

    /// Project the rotation back onto SO(3) (nearest rotation via SVD).
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Angle of the relative rotation and norm of the relative translation.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation_angle(), (self.translation - other.translation).norm())
    }
}

/// `t1 ∘ t2`
pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

fn default_depth_scale() -> f64 {
    0.001
}

/// Pinhole intrinsics without lens distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Meters per depth unit.
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

impl Default for CameraIntrinsics {
    /// 640x576 raster with a ~65° horizontal field of view.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 504.0,
            fy: 504.0,
            cx: 320.0,
            cy: 288.0,
            width: 640,
            height: 576,
            depth_scale: 0.001,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: 0.001,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::Intrinsics(format!(
                "principal point ({}, {}) outside {}x{} raster",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(GeometryError::Intrinsics("depth_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera-frame point at depth `z` through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Ray direction through pixel `(u, v)` scaled so that its `z` component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Whether the pixel-center coordinate falls on the raster.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    fn check_dims(&self, raster: &'static str, w: u32, h: u32) -> Result<(), GeometryError> {
        if w != self.width || h != self.height {
            return Err(GeometryError::DimensionMismatch {
                raster,
                expected_w: self.width,
                expected_h: self.height,
                found_w: w,
                found_h: h,
            });
        }
        Ok(())
    }
}

/// Row-major 16-bit depth raster; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(GeometryError::BufferLength {
                raster: "depth",
                expected,
                found: data.len(),
            });
        }
        Ok(DepthImage { width, height, data })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, value: u16) {
        self.data[v as usize * self.width as usize + u as usize] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0).count()
    }
}

/// Row-major interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, GeometryError> {
        let expected = 3 * width as usize * height as usize;
        if data.len() != expected {
            return Err(GeometryError::BufferLength {
                raster: "color",
                expected,
                found: data.len(),
            });
        }
        Ok(ColorImage { width, height, data })
    }

    pub fn black(width: u32, height: u32) -> Self {
        ColorImage {
            width,
            height,
            data: vec![0; 3 * width as usize * height as usize],
        }
    }

    pub fn pixel(&self, u: u32, v: u32) -> [u8; 3] {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: u32, v: u32, rgb: [u8; 3]) {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Coordinate frame a cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Frame {
    /// Freshly back-projected, sensor not yet assigned.
    #[default]
    Local,
    Sensor(u32),
    World,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<Rgb>>,
    pub normals: Option<Vec<Vec3>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            colors: None,
            normals: None,
            frame: Frame::Local,
        }
    }

    pub fn with_colors(mut self, colors: Vec<Rgb>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Self {
        self.normals = Some(normals);
        self
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.points.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(GeometryError::AttributeLength {
                    attribute: "colors",
                    points: n,
                    found: c.len(),
                });
            }
        }
        if let Some(nr) = &self.normals {
            if nr.len() != n {
                return Err(GeometryError::AttributeLength {
                    attribute: "normals",
                    points: n,
                    found: nr.len(),
                });
            }
        }
        Ok(())
    }

    /// Subset of the cloud, attributes included.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            frame: self.frame,
        }
    }

    /// Append `other`. Attributes survive only if both clouds carry them
    /// (an empty side never strips them).
    pub fn append(&mut self, other: &PointCloud) {
        if self.points.is_empty() {
            let frame = self.frame;
            *self = other.clone();
            self.frame = frame;
            return;
        }
        if other.points.is_empty() {
            return;
        }
        self.points.extend_from_slice(&other.points);
        self.colors = match (self.colors.take(), &other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
        self.normals = match (self.normals.take(), &other.normals) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    pub fn transformed(&self, t: &RigidTransform, frame: Frame) -> PointCloud {
        transform_cloud(self, t, frame)
    }
}

/// Lift every valid (and, with a mask, foreground) pixel to a camera-frame point.
pub fn back_project(
    depth: &DepthImage,
    intr: &CameraIntrinsics,
    color: Option<&ColorImage>,
    mask: Option<&BinaryMask>,
) -> Result<PointCloud, GeometryError> {
    intr.check_dims("depth", depth.width, depth.height)?;
    if let Some(c) = color {
        intr.check_dims("color", c.width, c.height)?;
    }
    if let Some(m) = mask {
        intr.check_dims("mask", m.width, m.height)?;
    }
    let mut points = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    let w = depth.width as usize;
    for (i, &raw) in depth.data.iter().enumerate() {
        if raw == 0 {
            continue;
        }
        if let Some(m) = mask {
            if !m.is_foreground_index(i) {
                continue;
            }
        }
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        points.push(intr.unproject(u, v, raw as f64 * intr.depth_scale));
        if let (Some(c), Some(out)) = (color, colors.as_mut()) {
            let px = &c.data[3 * i..3 * i + 3];
            out.push(Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64) / 255.0);
        }
    }
    Ok(PointCloud {
        points,
        colors,
        normals: None,
        frame: Frame::Local,
    })
}

/// Pixel coordinates and depth of a camera-frame point.
pub fn project(p: &Vec3, intr: &CameraIntrinsics) -> Result<(f64, f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, p.z))
}

/// Apply `t` to every point (normals are rotated only) and retag the frame.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform, frame: Frame) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        colors: cloud.colors.clone(),
        normals: cloud
            .normals
            .as_ref()
            .map(|n| n.iter().map(|v| t.apply_vector(v)).collect()),
        frame,
    }
}
