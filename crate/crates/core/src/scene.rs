//! Synthetic ray-cast scenes with analytic ground truth: checkerboard
//! planes and boxes viewed from a ring of pinhole cameras. Every acceptance
//! check that needs exact depth or exact correspondences builds on these.

use crate::geometry::{self, Camera, Ray};
use crate::img::{Image, ScalarImage};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SceneError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("camera error: {0}")]
    Camera(#[from] crate::geometry::CameraIoError),
    #[error("image error: {0}")]
    Image(#[from] crate::img::ImageIoError),
}

/// A finite checkered rectangle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlaneSpec {
    pub origin: [f64; 3],
    pub normal: [f64; 3],
    /// In-plane texture axis; the second axis is `normal x u_axis`.
    pub u_axis: [f64; 3],
    pub half_u: f64,
    pub half_v: f64,
    /// Checker tiles per world unit.
    pub checker_freq: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

/// An axis-aligned checkered box.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub checker_freq: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlaneSceneParams {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub n_train_views: usize,
    pub n_test_views: usize,
    /// Camera ring radius around the target.
    pub ring_radius: f64,
    /// Vertical offset of the ring.
    pub ring_height: f64,
    /// Angular spread of the ring.
    pub arc_degrees: f64,
    pub target: [f64; 3],
    pub planes: Vec<PlaneSpec>,
    pub boxes: Vec<BoxSpec>,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for PlaneSceneParams {
    fn default() -> Self {
        // A tilted checkered plane plus a fronto-parallel backdrop.
        Self {
            width: 64,
            height: 64,
            focal_px: 64.0,
            n_train_views: 3,
            n_test_views: 1,
            ring_radius: 2.0,
            ring_height: 0.15,
            arc_degrees: 50.0,
            target: [0.0, 0.0, 2.0],
            planes: vec![
                PlaneSpec {
                    origin: [0.0, 0.0, 2.0],
                    normal: [0.25, -0.15, -1.0],
                    u_axis: [1.0, 0.0, 0.0],
                    half_u: 1.6,
                    half_v: 1.6,
                    checker_freq: 2.5,
                    color_a: [0.85, 0.25, 0.2],
                    color_b: [0.92, 0.88, 0.75],
                },
                PlaneSpec {
                    origin: [0.0, 0.0, 3.2],
                    normal: [0.0, 0.0, -1.0],
                    u_axis: [1.0, 0.0, 0.0],
                    half_u: 6.0,
                    half_v: 6.0,
                    checker_freq: 1.0,
                    color_a: [0.2, 0.35, 0.65],
                    color_b: [0.3, 0.6, 0.4],
                },
            ],
            boxes: vec![],
            background: [0.05, 0.05, 0.08],
            seed: 0,
        }
    }
}

struct PreparedPlane {
    origin: Vector3<f64>,
    normal: Vector3<f64>,
    u_axis: Vector3<f64>,
    v_axis: Vector3<f64>,
    half_u: f64,
    half_v: f64,
    checker_freq: f64,
    color_a: Vector3<f64>,
    color_b: Vector3<f64>,
}

struct PreparedBox {
    min: Vector3<f64>,
    max: Vector3<f64>,
    checker_freq: f64,
    color_a: Vector3<f64>,
    color_b: Vector3<f64>,
}

/// Objects in castable form.
pub struct SceneGeometry {
    planes: Vec<PreparedPlane>,
    boxes: Vec<PreparedBox>,
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl SceneGeometry {
    fn prepare(params: &PlaneSceneParams) -> Result<Self, SceneError> {
        if params.planes.is_empty() && params.boxes.is_empty() {
            return Err(SceneError::DegenerateGeometry("no objects".into()));
        }
        let mut planes = Vec::new();
        for spec in &params.planes {
            let normal = v3(&spec.normal);
            if normal.norm() < 1e-9 {
                return Err(SceneError::DegenerateGeometry("zero plane normal".into()));
            }
            let normal = normal.normalize();
            let mut u_axis = v3(&spec.u_axis);
            u_axis -= normal * normal.dot(&u_axis);
            if u_axis.norm() < 1e-9 {
                return Err(SceneError::DegenerateGeometry(
                    "plane u-axis parallel to normal".into(),
                ));
            }
            let u_axis = u_axis.normalize();
            let v_axis = normal.cross(&u_axis);
            planes.push(PreparedPlane {
                origin: v3(&spec.origin),
                normal,
                u_axis,
                v_axis,
                half_u: spec.half_u,
                half_v: spec.half_v,
                checker_freq: spec.checker_freq,
                color_a: v3(&spec.color_a),
                color_b: v3(&spec.color_b),
            });
        }
        let mut boxes = Vec::new();
        for spec in &params.boxes {
            let c = v3(&spec.center);
            let he = v3(&spec.half_extents);
            if he.x <= 0.0 || he.y <= 0.0 || he.z <= 0.0 {
                return Err(SceneError::DegenerateGeometry("non-positive box extent".into()));
            }
            boxes.push(PreparedBox {
                min: c - he,
                max: c + he,
                checker_freq: spec.checker_freq,
                color_a: v3(&spec.color_a),
                color_b: v3(&spec.color_b),
            });
        }
        Ok(Self { planes, boxes })
    }

    /// Nearest hit along a ray: distance and surface color.
    pub fn cast(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for plane in &self.planes {
            let denom = ray.direction.dot(&plane.normal);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = (plane.origin - ray.origin).dot(&plane.normal) / denom;
            if t <= 1e-9 {
                continue;
            }
            let hit = ray.origin + t * ray.direction;
            let rel = hit - plane.origin;
            let u = rel.dot(&plane.u_axis);
            let v = rel.dot(&plane.v_axis);
            if u.abs() > plane.half_u || v.abs() > plane.half_v {
                continue;
            }
            if best.is_none_or(|(bt, _)| t < bt) {
                let color = checker(u, v, plane.checker_freq, plane.color_a, plane.color_b);
                best = Some((t, color));
            }
        }
        for bx in &self.boxes {
            if let Some((t, u, v)) = ray_box(ray, &bx.min, &bx.max) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    let color = checker(u, v, bx.checker_freq, bx.color_a, bx.color_b);
                    best = Some((t, color));
                }
            }
        }
        best
    }

    /// Analytic camera-space depth at a (possibly subpixel) position.
    pub fn depth_at(&self, camera: &Camera, pixel: &Vector2<f64>) -> Option<f64> {
        let ray = geometry::ray_from_pixel(camera, pixel);
        let (t, _) = self.cast(&ray)?;
        let fwd_z = (camera.world_to_cam_rotation() * ray.direction).z;
        Some(t * fwd_z)
    }
}

fn checker(u: f64, v: f64, freq: f64, a: Vector3<f64>, b: Vector3<f64>) -> Vector3<f64> {
    let iu = (u * freq).floor() as i64;
    let iv = (v * freq).floor() as i64;
    if (iu + iv).rem_euclid(2) == 0 {
        a
    } else {
        b
    }
}

/// Slab intersection; returns (t, u, v) where (u, v) parameterize the hit
/// face for texturing.
fn ray_box(ray: &Ray, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let mut t0 = 1e-9;
    let mut t1 = f64::INFINITY;
    let mut axis_in = 0usize;
    for k in 0..3 {
        let inv = 1.0 / ray.direction[k];
        let (mut near, mut far) = ((min[k] - ray.origin[k]) * inv, (max[k] - ray.origin[k]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        if near > t0 {
            t0 = near;
            axis_in = k;
        }
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    let hit = ray.origin + t0 * ray.direction;
    let (ua, va) = match axis_in {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    Some((t0, hit[ua], hit[va]))
}

/// Look-at rotation: camera +z towards the target, +x to the right.
fn look_at_rotation(pos: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>, SceneError> {
    let fwd = target - pos;
    if fwd.norm() < 1e-9 {
        return Err(SceneError::DegenerateGeometry("camera at target".into()));
    }
    let fwd = fwd.normalize();
    let mut up = Vector3::new(0.0, 1.0, 0.0);
    if fwd.cross(&up).norm() < 1e-6 {
        up = Vector3::new(0.0, 0.0, 1.0);
    }
    let right = up.cross(&fwd).normalize();
    let down = fwd.cross(&right);
    Ok(Matrix3::from_columns(&[right, down, fwd]))
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Train views first, then test views; ids are their indices here.
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub depths: Vec<ScalarImage>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub params: PlaneSceneParams,
}

impl SyntheticScene {
    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry::prepare(&self.params).expect("params were validated at build time")
    }

    pub fn camera(&self, id: u32) -> &Camera {
        geometry::camera_by_id(&self.cameras, id).expect("valid view id")
    }

    pub fn image(&self, id: u32) -> &Image {
        &self.images[id as usize]
    }

    pub fn depth(&self, id: u32) -> &ScalarImage {
        &self.depths[id as usize]
    }
}

/// Ray-cast one view.
pub fn render_ground_truth(geo: &SceneGeometry, camera: &Camera, background: &Vector3<f64>) -> (Image, ScalarImage) {
    let mut img = Image::new(camera.width, camera.height);
    let mut depth = ScalarImage::new(camera.width, camera.height);
    let w2c = camera.world_to_cam_rotation();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = geometry::ray_from_pixel(camera, &Vector2::new(x as f64, y as f64));
            match geo.cast(&ray) {
                Some((t, color)) => {
                    img.set(x, y, color);
                    depth.set(x, y, t * (w2c * ray.direction).z);
                }
                None => img.set(x, y, *background),
            }
        }
    }
    (img, depth)
}

/// Build the full synthetic scene: cameras on an arc looking at the target,
/// analytic images and depth maps per view. Test cameras interleave between
/// the train positions.
pub fn make_plane_scene(params: &PlaneSceneParams) -> Result<SyntheticScene, SceneError> {
    if params.focal_px <= 0.0 {
        return Err(SceneError::DegenerateGeometry("non-positive focal".into()));
    }
    if params.n_train_views == 0 {
        return Err(SceneError::DegenerateGeometry("no training views".into()));
    }
    let geo = SceneGeometry::prepare(params)?;
    let target = v3(&params.target);
    let arc = params.arc_degrees.to_radians();
    let n_train = params.n_train_views;
    let n_test = params.n_test_views;

    // Train angles spread evenly over the arc; test angles at midpoints.
    let train_angles: Vec<f64> = if n_train == 1 {
        vec![0.0]
    } else {
        (0..n_train)
            .map(|i| -arc / 2.0 + arc * i as f64 / (n_train - 1) as f64)
            .collect()
    };
    let test_angles: Vec<f64> = (0..n_test)
        .map(|i| {
            if n_train >= 2 {
                let seg = i % (n_train - 1);
                (train_angles[seg] + train_angles[seg + 1]) / 2.0
            } else {
                arc / 8.0 * (i + 1) as f64
            }
        })
        .collect();

    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let bg = v3(&params.background);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (id, (is_test, angle)) in train_angles
        .iter()
        .map(|&a| (false, a))
        .chain(test_angles.iter().map(|&a| (true, a)))
        .enumerate()
    {
        let id = id as u32;
        let pos = target
            + Vector3::new(
                params.ring_radius * angle.sin(),
                params.ring_height,
                -params.ring_radius * angle.cos(),
            );
        let rot = look_at_rotation(&pos, &target)?;
        let cam = Camera::from_fov(id, params.width, params.height, params.focal_px, rot, pos)
            .map_err(|e| SceneError::DegenerateGeometry(e.to_string()))?;
        let (img, depth) = render_ground_truth(&geo, &cam, &bg);
        cameras.push(cam);
        images.push(img);
        depths.push(depth);
        if is_test {
            test_ids.push(id);
        } else {
            train_ids.push(id);
        }
    }

    Ok(SyntheticScene {
        cameras,
        images,
        depths,
        train_ids,
        test_ids,
        params: params.clone(),
    })
}

// ---------------------------------------------------------------------------
// Scene directory: cameras.json + images/ + depths/ + matches.jsonl + meta.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneMeta {
    description: PlaneSceneParams,
    train_views: Vec<u32>,
    test_views: Vec<u32>,
}

pub fn export_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("depths"))?;
    geometry::save_cameras(&dir.join("cameras.json"), &scene.cameras)?;
    for cam in &scene.cameras {
        crate::img::write_image(
            &dir.join("images").join(format!("view_{:03}.png", cam.id)),
            scene.image(cam.id),
        )?;
        crate::img::write_depth(
            &dir.join("depths").join(format!("view_{:03}.bin", cam.id)),
            scene.depth(cam.id),
        )?;
    }
    let meta = SceneMeta {
        description: scene.params.clone(),
        train_views: scene.train_ids.clone(),
        test_views: scene.test_ids.clone(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// A scene loaded back from disk; images are 8-bit quantized.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub depths: Vec<ScalarImage>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

impl LoadedScene {
    pub fn camera(&self, id: u32) -> Option<&Camera> {
        geometry::camera_by_id(&self.cameras, id)
    }
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene, SceneError> {
    let cameras = geometry::load_cameras(&dir.join("cameras.json"))?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for cam in &cameras {
        images.push(crate::img::read_image(
            &dir.join("images").join(format!("view_{:03}.png", cam.id)),
        )?);
        let depth_path = dir.join("depths").join(format!("view_{:03}.bin", cam.id));
        if depth_path.exists() {
            depths.push(crate::img::read_depth(&depth_path)?);
        }
    }
    let meta_path = dir.join("meta.json");
    let (train_ids, test_ids) = if meta_path.exists() {
        let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        (meta.train_views, meta.test_views)
    } else {
        (cameras.iter().map(|c| c.id).collect(), Vec::new())
    };
    Ok(LoadedScene {
        cameras,
        images,
        depths,
        train_ids,
        test_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn frontal_params() -> PlaneSceneParams {
        PlaneSceneParams {
            n_train_views: 1,
            n_test_views: 0,
            ring_radius: 2.0,
            ring_height: 0.0,
            arc_degrees: 0.0,
            target: [0.0, 0.0, 2.0],
            planes: vec![PlaneSpec {
                origin: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                u_axis: [1.0, 0.0, 0.0],
                half_u: 10.0,
                half_v: 10.0,
                checker_freq: 2.0,
                color_a: [1.0, 0.0, 0.0],
                color_b: [0.0, 1.0, 0.0],
            }],
            ..Default::default()
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        // Camera sits 2 units in front of the plane, looking straight at it.
        let scene = make_plane_scene(&frontal_params()).unwrap();
        let depth = &scene.depths[0];
        for &d in &depth.data {
            assert_relative_eq!(d, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn tilted_plane_depth_matches_plane_ray_intersection() {
        let mut params = frontal_params();
        params.planes[0].normal = [0.3, 0.1, -1.0];
        let scene = make_plane_scene(&params).unwrap();
        let geo = scene.geometry();
        let cam = &scene.cameras[0];
        let n = Vector3::new(0.3, 0.1, -1.0).normalize();
        let p0 = Vector3::new(0.0, 0.0, 2.0);
        for x in [0usize, 13, 31, 50, 63] {
            let y = 40usize;
            let ray = geometry::ray_from_pixel(cam, &Vector2::new(x as f64, y as f64));
            let t = (p0 - ray.origin).dot(&n) / ray.direction.dot(&n);
            let expect = t * (cam.world_to_cam_rotation() * ray.direction).z;
            assert_relative_eq!(scene.depths[0].get(x, y), expect, epsilon = 1e-9);
            assert_relative_eq!(
                geo.depth_at(cam, &Vector2::new(x as f64, y as f64)).unwrap(),
                expect,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn depth_maps_satisfy_lift_project_round_trip() {
        let scene = make_plane_scene(&PlaneSceneParams::default()).unwrap();
        for (cam, depth) in scene.cameras.iter().zip(scene.depths.iter()) {
            for (x, y) in [(3usize, 5usize), (20, 40), (60, 10), (33, 33)] {
                let d = depth.get(x, y);
                if d <= 0.0 {
                    continue;
                }
                let p = Vector2::new(x as f64, y as f64);
                let lifted = geometry::lift_pixel(cam, &p, d).unwrap();
                let back = geometry::project_point(cam, &lifted).unwrap();
                assert!((back - p).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn two_view_matches_triangulate_onto_the_surface() {
        let params = PlaneSceneParams {
            n_train_views: 2,
            n_test_views: 0,
            ..Default::default()
        };
        let scene = make_plane_scene(&params).unwrap();
        let (cam_i, cam_j) = (&scene.cameras[0], &scene.cameras[1]);
        let depth_i = &scene.depths[0];
        let mut checked = 0;
        for (x, y) in [(10usize, 10usize), (32, 32), (50, 20), (20, 50)] {
            let d = depth_i.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let p_i = Vector2::new(x as f64, y as f64);
            let surface = geometry::lift_pixel(cam_i, &p_i, d).unwrap();
            let Ok(p_j) = geometry::project_point(cam_j, &surface) else {
                continue;
            };
            if !cam_j.contains_pixel(&p_j) {
                continue;
            }
            let ray_i = geometry::ray_from_pixel(cam_i, &p_i);
            let ray_j = geometry::ray_from_pixel(cam_j, &p_j);
            let (rec, gap) = geometry::triangulate(&ray_i, &ray_j).unwrap();
            assert!(gap < 1e-6);
            assert!((rec - surface).norm() < 1e-6);
            checked += 1;
        }
        assert!(checked >= 2, "too few valid correspondences to check");
    }

    #[test]
    fn boxes_occlude_the_backdrop() {
        let mut params = frontal_params();
        params.boxes.push(BoxSpec {
            center: [0.0, 0.0, 1.5],
            half_extents: [0.3, 0.3, 0.2],
            checker_freq: 4.0,
            color_a: [1.0, 1.0, 0.0],
            color_b: [0.0, 0.0, 1.0],
        });
        let scene = make_plane_scene(&params).unwrap();
        // The center pixel sees the box front face (z = 1.3), not the plane.
        let d_center = scene.depths[0].get(32, 32);
        assert_relative_eq!(d_center, 1.3, epsilon = 1e-9);
        assert_relative_eq!(scene.depths[0].get(0, 0), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_params_are_rejected() {
        let mut params = frontal_params();
        params.planes[0].normal = [0.0, 0.0, 0.0];
        assert!(matches!(
            make_plane_scene(&params),
            Err(SceneError::DegenerateGeometry(_))
        ));
        let empty = PlaneSceneParams {
            planes: vec![],
            boxes: vec![],
            ..Default::default()
        };
        assert!(make_plane_scene(&empty).is_err());
    }

    #[test]
    fn scene_export_import_round_trip() {
        let scene = make_plane_scene(&PlaneSceneParams {
            width: 16,
            height: 16,
            ..Default::default()
        })
        .unwrap();
        let dir = std::env::temp_dir().join("scgs_scene_test");
        let _ = std::fs::remove_dir_all(&dir);
        export_scene(&dir, &scene).unwrap();
        let loaded = load_scene(&dir).unwrap();
        assert_eq!(loaded.cameras.len(), scene.cameras.len());
        assert_eq!(loaded.train_ids, scene.train_ids);
        assert_eq!(loaded.test_ids, scene.test_ids);
        // Depth is bit-exact; images are 8-bit quantized.
        assert_eq!(loaded.depths[0], scene.depths[0]);
        for (a, b) in loaded.images[0].data.iter().zip(scene.images[0].data.iter()) {
            assert!((a - b).amax() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
