//! Rigid-body math, the pinhole camera and triangle meshes.
//!
//! Camera frame: +z forward, +x right, +y down. Pixel `(u, v)` samples the
//! image plane at exactly `(u, v)`, so the principal point is the pixel whose
//! ray is the optical axis. All lengths are meters.

mod shapes;

use alloc::format;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, SVD};

use crate::prelude::*;
use crate::{Error, Result};

pub use shapes::{blob, cube, cuboid, cylinder, icosphere, subdivide};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::domain("translation is not finite"));
        }
        if !pose.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::domain("rotation is not orthonormal with det +1"));
        }
        Ok(pose)
    }

    /// Builds a pose from a nearly orthonormal matrix by projecting it onto SO(3).
    pub fn orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rotation = nearest_rotation(&rotation)?;
        Self::new(rotation, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        if !r.iter().all(|x| x.is_finite()) {
            return false;
        }
        let residual = r.transpose() * r - Matrix3::identity();
        residual.iter().all(|x| x.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_row_major(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        out
    }

    /// Reads a row-major 4×4 homogeneous matrix. The bottom row must be `0 0 0 1`.
    pub fn from_row_major(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::domain("bottom row of a rigid transform must be 0 0 0 1"));
        }
        let rotation = Matrix3::from_fn(|i, j| m[i][j]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
    }

    /// Geodesic angle between the rotations of two poses, in radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin2 = skew.norm();
    let cos2 = r.trace() - 1.0;
    sin2.atan2(cos2)
}

/// Projects an arbitrary 3×3 matrix onto the closest rotation in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::domain("matrix is not finite"));
    }
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::degenerate("svd did not converge")),
    };
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(u * fix * v_t)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation `Rz(az) · Ry(ay) · Rx(ax)` for `angles = (ax, ay, az)`.
pub fn rotation_from_axis_angles(angles: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(angles.z) * rot_y(angles.y) * rot_x(angles.x)
}

/// Inverse of [`rotation_from_axis_angles`]; `ay` is returned in `[-π/2, π/2]`.
pub fn axis_angles_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let ay = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let ax = r[(2, 1)].atan2(r[(2, 2)]);
    let az = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(ax, ay, az)
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::domain(format!("cx = {} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::domain(format!("cy = {} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit-depth ray direction `((u - cx)/fx, (v - cy)/fy, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if !(p.z > 0.0) {
        return Err(Error::domain(format!("cannot project point with depth {}", p.z)));
    }
    Ok(project_unchecked(p, k))
}

#[inline]
pub(crate) fn project_unchecked(p: &Vector3<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

pub fn backproject(pixel: &Vector2<f64>, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("cannot backproject with depth {depth}")));
    }
    Ok(k.ray(pixel.x, pixel.y) * depth)
}

/// Triangle mesh in the model frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshModel {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub diameter: f64,
    /// Model-frame symmetry transforms; always contains the identity.
    pub symmetries: Vec<Pose>,
}

impl MeshModel {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>, symmetries: Vec<Pose>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::domain("mesh has no vertices"));
        }
        if !vertices.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::domain("mesh has non-finite vertices"));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::domain(format!(
                "face {f:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        let mut symmetries = symmetries;
        let has_identity = symmetries
            .iter()
            .any(|s| (s.rotation - Matrix3::identity()).amax() < 1e-12 && s.translation.amax() < 1e-12);
        if !has_identity {
            symmetries.insert(0, Pose::identity());
        }
        let diameter = max_pairwise_distance(&vertices);
        Ok(Self {
            vertices,
            faces,
            diameter,
            symmetries,
        })
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum = self.vertices.iter().fold(Vector3::zeros(), |acc, v| acc + v);
        sum / self.vertices.len() as f64
    }

    /// Radius of the origin-centered sphere that contains every vertex.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn transformed_vertices(&self, pose: &Pose) -> Vec<Vector3<f64>> {
        self.vertices.iter().map(|v| pose.apply(v)).collect()
    }
}

fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}
