//! Pinhole cameras, multi-camera rigs and frustum generation.
//!
//! All 3D points live in the ego frame. A camera stores its ego-to-camera
//! extrinsics `(R, t)` together with intrinsics `K`, so that for an ego point
//! `X` the homogeneous product `K (R X + t)` equals `d * [u, v, 1]`.

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::depth::DepthBins;
use crate::error::{Error, Result};

/// Points at or below this camera-frame depth are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    name: String,
    width: usize,
    height: usize,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    feature_stride: usize,
    intrinsics_inv: Matrix3<f64>,
}

impl Camera {
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        feature_stride: usize,
    ) -> Result<Self> {
        let name = name.into();
        let invalid = |field: &'static str, reason: String| Error::InvalidCamera {
            camera: name.clone(),
            field,
            reason,
        };
        if width == 0 {
            return Err(invalid("width", "must be at least 1".into()));
        }
        if height == 0 {
            return Err(invalid("height", "must be at least 1".into()));
        }
        if feature_stride == 0 {
            return Err(invalid("stride", "must be at least 1".into()));
        }
        let k = &intrinsics;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(invalid("K", "entries must be finite".into()));
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(invalid("K", "last row must be [0, 0, 1]".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(invalid("K", "focal lengths must be positive".into()));
        }
        if rotation.iter().any(|v| !v.is_finite()) {
            return Err(invalid("R", "entries must be finite".into()));
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if dev > ORTHONORMAL_TOL {
            return Err(invalid(
                "R",
                format!("not orthonormal (max |R^T R - I| = {dev:.3e})"),
            ));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(invalid("t", "entries must be finite".into()));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| invalid("K", "singular".into()))?;
        Ok(Self {
            name,
            width,
            height,
            intrinsics,
            rotation,
            translation,
            feature_stride,
            intrinsics_inv,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn feature_stride(&self) -> usize {
        self.feature_stride
    }

    /// Returns a copy with a different feature stride.
    pub fn with_feature_stride(&self, stride: usize) -> Result<Self> {
        Camera::new(
            self.name.clone(),
            self.width,
            self.height,
            self.intrinsics,
            self.rotation,
            self.translation,
            stride,
        )
    }

    /// Feature-map size `(width, height)`: image size divided by the stride, rounded up.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.width.div_ceil(self.feature_stride),
            self.height.div_ceil(self.feature_stride),
        )
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    pub fn project(&self, point: &Vector3<f64>) -> ProjectionHit {
        let cam = self.rotation * point + self.translation;
        let h = self.intrinsics * cam;
        let depth = h.z;
        if depth <= MIN_DEPTH {
            return ProjectionHit {
                camera_index: 0,
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            };
        }
        let u = h.x / depth;
        let v = h.y / depth;
        let valid = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        ProjectionHit {
            camera_index: 0,
            u,
            v,
            depth,
            valid,
        }
    }

    /// Ego-frame point that projects to pixel `(u, v)` at camera depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 || depth.is_nan() {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.unproject_unchecked(u, v, depth))
    }

    fn unproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let cam = self.intrinsics_inv * Vector3::new(u * depth, v * depth, depth);
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Ego-frame direction of the ray through `(u, v)`, scaled so that moving
    /// one unit along it increases camera depth by one meter.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        self.rotation.transpose() * (self.intrinsics_inv * Vector3::new(u, v, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidRig("a rig needs at least one camera".into()));
        }
        for (i, a) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidRig(format!(
                    "duplicate camera name `{}`",
                    a.name
                )));
            }
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Overrides the feature stride of every camera.
    pub fn with_feature_stride(&self, stride: usize) -> Result<Self> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| c.with_feature_stride(stride))
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cameras)
    }

    /// Projects one ego point into every camera, in rig order.
    pub fn project(&self, point: &Vector3<f64>) -> Vec<ProjectionHit> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, c)| ProjectionHit {
                camera_index: i,
                ..c.project(point)
            })
            .collect()
    }
}

/// Result of projecting an ego point into one camera. `u`, `v` are NaN when
/// the point is behind the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionHit {
    pub camera_index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Ego-frame lift positions for every (feature cell, depth bin) of one camera.
///
/// Ordering is row-major over feature cells, then ascending bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPoints {
    feature_width: usize,
    feature_height: usize,
    bins: usize,
    points: Vec<Vector3<f64>>,
}

impl FrustumPoints {
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn feature_height(&self) -> usize {
        self.feature_height
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point(&self, x: usize, y: usize, bin: usize) -> &Vector3<f64> {
        &self.points[(y * self.feature_width + x) * self.bins + bin]
    }
}

pub fn build_frustum(camera: &Camera, bins: &DepthBins) -> FrustumPoints {
    let (fw, fh) = camera.feature_size();
    let stride = camera.feature_stride() as f64;
    let mut points = Vec::with_capacity(fw * fh * bins.count());
    for y in 0..fh {
        let v = (y as f64 + 0.5) * stride;
        for x in 0..fw {
            let u = (x as f64 + 0.5) * stride;
            for k in 0..bins.count() {
                points.push(camera.unproject_unchecked(u, v, bins.center(k)));
            }
        }
    }
    FrustumPoints {
        feature_width: fw,
        feature_height: fh,
        bins: bins.count(),
        points,
    }
}
