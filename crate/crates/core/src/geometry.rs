//! Pinhole camera math shared by every other module: projection, pixel
//! lifting, view rays and two-ray triangulation.
//!
//! Conventions:
//! - Pixel centers sit at integer coordinates; the homogeneous pixel is
//!   `[u, v, 1]`.
//! - Extrinsics are stored camera-to-world, so the camera center is `t` and
//!   world-to-camera is derived on demand (`x_cam = R^T (X - t)`).

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Depth below this counts as behind the camera plane.
pub const EPS_DEPTH: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth {z:.3e}")]
    NonPositiveDepth { z: f64 },
    #[error("distance along ray must be positive, got {0:.3e}")]
    NonPositiveDistance(f64),
    #[error("rays are parallel (|d_i . d_j| = {0})")]
    ParallelRays(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Error, Debug)]
pub enum CameraIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] GeometryError),
    #[error("duplicate view id {0}")]
    DuplicateViewId(u32),
}

/// A pinhole camera: intrinsics `K`, camera-to-world rotation `R` and camera
/// center `t`, plus the image extent in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        id: u32,
        width: usize,
        height: usize,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            id,
            width,
            height,
            intrinsics,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Convenience constructor for identical focal lengths and an explicit
    /// principal point.
    pub fn from_fov(
        id: u32,
        width: usize,
        height: usize,
        focal_px: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let k = Matrix3::new(focal_px, 0.0, cx, 0.0, focal_px, cy, 0.0, 0.0, 1.0);
        Self::new(id, width, height, k, rotation, translation)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation not orthonormal (|RR^T - I| = {ortho:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation determinant {det} != 1"
            )));
        }
        let (fx, fy) = (self.fx(), self.fy());
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        let (cx, cy) = (self.cx(), self.cy());
        if cx < 0.0 || cx >= self.width as f64 || cy < 0.0 || cy >= self.height as f64 {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside image {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// World-to-camera rotation, i.e. `R^T`.
    pub fn world_to_cam_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    /// World point into camera coordinates.
    pub fn world_to_cam(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// True when the continuous pixel coordinate lies inside the image, with
    /// pixel centers at integers (valid range `[0, w-1] x [0, h-1]`).
    pub fn contains_pixel(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x <= (self.width - 1) as f64 && p.y >= 0.0 && p.y <= (self.height - 1) as f64
    }
}

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }
}

/// Project a world point through the camera onto the image plane.
///
/// Returns `pi(K R^T (X - t))` with `pi([x, y, z]) = [x/z, y/z]`. The result
/// may lie outside the image bounds; callers decide what to do with it.
pub fn project_point(camera: &Camera, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let p_cam = camera.world_to_cam(x);
    if p_cam.z <= EPS_DEPTH {
        return Err(GeometryError::NonPositiveDepth { z: p_cam.z });
    }
    Ok(Vector2::new(
        camera.fx() * p_cam.x / p_cam.z + camera.cx(),
        camera.fy() * p_cam.y / p_cam.z + camera.cy(),
    ))
}

/// Lift a pixel back to a world point at the given camera-space depth:
/// `nu = R (depth * K^-1 p~) + t`.
pub fn lift_pixel(
    camera: &Camera,
    p: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { z: depth });
    }
    let dir_cam = Vector3::new(
        (p.x - camera.cx()) / camera.fx(),
        (p.y - camera.cy()) / camera.fy(),
        1.0,
    );
    Ok(camera.rotation() * (depth * dir_cam) + camera.center())
}

/// The world-space viewing ray through a pixel. The origin is the camera
/// center; `lift_pixel(camera, p, z)` lies on this ray for every `z > 0`.
pub fn ray_from_pixel(camera: &Camera, p: &Vector2<f64>) -> Ray {
    let dir_cam = Vector3::new(
        (p.x - camera.cx()) / camera.fx(),
        (p.y - camera.cy()) / camera.fy(),
        1.0,
    );
    Ray::new(camera.center(), camera.rotation() * dir_cam)
}

/// Evaluate `o + z d` for `z > 0`.
pub fn point_on_ray(ray: &Ray, z: f64) -> Result<Vector3<f64>, GeometryError> {
    if z <= 0.0 {
        return Err(GeometryError::NonPositiveDistance(z));
    }
    Ok(ray.origin + z * ray.direction)
}

/// Midpoint of the closest-approach segment between two rays, together with
/// the segment length. The midpoint minimizes the sum of squared distances to
/// both lines.
pub fn triangulate(ray_i: &Ray, ray_j: &Ray) -> Result<(Vector3<f64>, f64), GeometryError> {
    let d_i = ray_i.direction;
    let d_j = ray_j.direction;
    let b = d_i.dot(&d_j);
    if b.abs() >= 1.0 - 1e-9 {
        return Err(GeometryError::ParallelRays(b.abs()));
    }
    // Normal equations for min_{s,u} |o_i + s d_i - o_j - u d_j|^2 with unit
    // directions: s - b u = -d, b s - u = -e where w = o_i - o_j.
    let w = ray_i.origin - ray_j.origin;
    let d = d_i.dot(&w);
    let e = d_j.dot(&w);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let u = (e - b * d) / denom;
    let p_i = ray_i.origin + s * d_i;
    let p_j = ray_j.origin + u * d_j;
    Ok(((p_i + p_j) * 0.5, (p_i - p_j).norm()))
}

/// Epipolar line of pixel `p_i` (from `cam_i`) in the image plane of `cam_j`,
/// as homogeneous coefficients `(a, b, c)` with `a u + b v + c = 0`.
pub fn epipolar_line(cam_i: &Camera, cam_j: &Camera, p_i: &Vector2<f64>) -> Vector3<f64> {
    // x_j = R_rel x_i + t_rel mapping camera-i coordinates into camera j.
    let r_rel = cam_j.rotation().transpose() * cam_i.rotation();
    let t_rel = cam_j.rotation().transpose() * (cam_i.center() - cam_j.center());
    let essential = skew(&t_rel) * r_rel;
    let f = cam_j.intrinsics().transpose().try_inverse().unwrap()
        * essential
        * cam_i.intrinsics().try_inverse().unwrap();
    f * Vector3::new(p_i.x, p_i.y, 1.0)
}

/// Perpendicular distance from pixel `p` to the homogeneous line `l`.
pub fn line_point_distance(l: &Vector3<f64>, p: &Vector2<f64>) -> f64 {
    let denom = (l.x * l.x + l.y * l.y).sqrt();
    if denom < 1e-300 {
        return f64::INFINITY;
    }
    (l.x * p.x + l.y * p.y + l.z).abs() / denom
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// ---------------------------------------------------------------------------
// Camera file: one JSON document per scene listing every view.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    width: usize,
    height: usize,
    /// Row-major 3x3 intrinsics.
    #[serde(rename = "K")]
    k: [f64; 9],
    /// Row-major 3x3 camera-to-world rotation.
    #[serde(rename = "R")]
    r: [f64; 9],
    /// Camera center in world units.
    t: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut k = [0.0; 9];
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                k[row * 3 + col] = c.intrinsics[(row, col)];
                r[row * 3 + col] = c.rotation[(row, col)];
            }
        }
        Self {
            id: c.id,
            width: c.width,
            height: c.height,
            k,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Self, GeometryError> {
        Camera::new(
            rec.id,
            rec.width,
            rec.height,
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::new(rec.t[0], rec.t[1], rec.t[2]),
        )
    }
}

/// Load every camera of a scene, sorted by view id.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, CameraIoError> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    let mut cameras = Vec::with_capacity(records.len());
    for rec in &records {
        cameras.push(Camera::try_from(rec)?);
    }
    cameras.sort_by_key(|c| c.id);
    for pair in cameras.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(CameraIoError::DuplicateViewId(pair[0].id));
        }
    }
    Ok(cameras)
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<(), CameraIoError> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    let text = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Find a camera by view id in a slice sorted or unsorted by id.
pub fn camera_by_id(cameras: &[Camera], id: u32) -> Option<&Camera> {
    cameras.iter().find(|c| c.id == id)
}
