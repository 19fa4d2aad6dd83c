//! Reverse-mode gradients through the compositing chain.
//!
//! Per pixel the forward computed, over contributors i in front-to-back
//! order with transmittance `T_i`:
//!
//! ```text
//! C = sum_i c_i a_i T_i + T_end bg      (a_i = composited alpha)
//! D = sum_i z_i a_i T_i                 (optionally divided by A)
//! A = sum_i a_i T_i
//! ```
//!
//! The pixel phase runs a reverse scan over the saved contributor list and
//! accumulates, per splat: the color and depth cotangents, the opacity
//! cotangent, and the two moments `sum gq d` and `sum gq d d^T` of the
//! Gaussian-weight cotangent `gq = dL/dq`. The finalize phase then chains
//! those moments once per splat through the projected covariance, the
//! pinhole Jacobian, the 3D covariance factorization, the spherical
//! harmonics and (for ray-bound primitives) the ray parameterization.

use super::{PreparedSplat, RenderOutput};
use crate::geometry::Camera;
use crate::img::{Image, ScalarImage};
use crate::model::{
    quat_rotation_backward, quat_to_rotation, sh_basis_grad, sh_coeff_count, sigmoid, HybridModel,
    PrimitiveKind,
};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BackwardError {
    #[error("render output was produced without retain_for_backward")]
    MissingContributorRecord,
    #[error("gradients are undefined with an opacity override")]
    OpacityOverridden,
    #[error("upstream gradient shape mismatch")]
    ShapeMismatch,
}

/// Per-primitive gradient accumulators mirroring every learnable field, plus
/// view-space position-gradient statistics for densification.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub d_position: Vec<Vector3<f64>>,
    pub d_z_raw: Vec<f64>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_rotation: Vec<Vector4<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_sh: Vec<Vec<Vector3<f64>>>,
    /// Accumulated norm of the screen-space position gradient, in normalized
    /// device units (pixel gradients scaled by half the image size).
    pub view_grad_norm: Vec<f64>,
    /// Number of renders in which the primitive contributed to some pixel.
    pub hits: Vec<u32>,
}

impl GradientBuffer {
    pub fn zeros(model: &HybridModel) -> Self {
        let n = model.len();
        let coeffs = sh_coeff_count(model.sh_degree);
        Self {
            d_position: vec![Vector3::zeros(); n],
            d_z_raw: vec![0.0; n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_rotation: vec![Vector4::zeros(); n],
            d_opacity_logit: vec![0.0; n],
            d_sh: vec![vec![Vector3::zeros(); coeffs]; n],
            view_grad_norm: vec![0.0; n],
            hits: vec![0; n],
        }
    }

    /// Accumulate another buffer (same model) into this one.
    pub fn add(&mut self, other: &GradientBuffer) {
        for i in 0..self.d_position.len() {
            self.d_position[i] += other.d_position[i];
            self.d_z_raw[i] += other.d_z_raw[i];
            self.d_log_scale[i] += other.d_log_scale[i];
            self.d_rotation[i] += other.d_rotation[i];
            self.d_opacity_logit[i] += other.d_opacity_logit[i];
            for (a, b) in self.d_sh[i].iter_mut().zip(other.d_sh[i].iter()) {
                *a += *b;
            }
            self.view_grad_norm[i] += other.view_grad_norm[i];
            self.hits[i] += other.hits[i];
        }
    }
}

/// Per-splat accumulators from the pixel phase.
#[derive(Debug, Clone, Copy)]
struct SplatAcc {
    dc: Vector3<f64>,
    dd: f64,
    da: f64,
    v1: Vector2<f64>,
    /// (xx, xy, yy) moments of gq * d d^T.
    v2: [f64; 3],
    hit: bool,
}

impl Default for SplatAcc {
    fn default() -> Self {
        Self {
            dc: Vector3::zeros(),
            dd: 0.0,
            da: 0.0,
            v1: Vector2::zeros(),
            v2: [0.0; 3],
            hit: false,
        }
    }
}

fn merge_accs(into: &mut [SplatAcc], from: &[SplatAcc]) {
    for (a, b) in into.iter_mut().zip(from.iter()) {
        a.dc += b.dc;
        a.dd += b.dd;
        a.da += b.da;
        a.v1 += b.v1;
        a.v2[0] += b.v2[0];
        a.v2[1] += b.v2[1];
        a.v2[2] += b.v2[2];
        a.hit |= b.hit;
    }
}

/// Backpropagate upstream color and depth gradients through a retained
/// render into per-primitive parameter gradients.
pub fn render_backward(
    model: &HybridModel,
    camera: &Camera,
    output: &RenderOutput,
    d_color: &Image,
    d_depth: &ScalarImage,
) -> Result<GradientBuffer, BackwardError> {
    let (Some(rows), Some(prepared)) = (&output.contributors, &output.prepared) else {
        return Err(BackwardError::MissingContributorRecord);
    };
    if output.options.opacity_override.is_some() {
        return Err(BackwardError::OpacityOverridden);
    }
    let (w, h) = (camera.width, camera.height);
    if d_color.width != w || d_color.height != h || d_depth.width != w || d_depth.height != h {
        return Err(BackwardError::ShapeMismatch);
    }

    let opts = &output.options;
    let clamp = opts.alpha_clamp;
    let bg = opts.background;
    let normalize = opts.normalize_depth;
    let depth_raw = output.raw_depth();

    // Pixel phase, banded over rows; bands merge in fixed order so the
    // result is independent of the worker count.
    const BAND: usize = 16;
    let bands: Vec<Vec<SplatAcc>> = (0..h.div_ceil(BAND))
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![SplatAcc::default(); prepared.len()];
            let y0 = band * BAND;
            let y1 = (y0 + BAND).min(h);
            for (y, row) in rows.iter().enumerate().take(y1).skip(y0) {
                for x in 0..w {
                    let lo = row.offsets[x] as usize;
                    let hi = row.offsets[x + 1] as usize;
                    if lo == hi {
                        continue;
                    }
                    let u_c = d_color.get(x, y);
                    let mut u_d = d_depth.get(x, y);
                    let mut u_a = 0.0;
                    if normalize {
                        // depth_out = depth_raw / max(A, eps)
                        let a_total = output.alpha.get(x, y);
                        let m = a_total.max(1e-12);
                        let raw = depth_raw.get(x, y);
                        let u_norm = u_d;
                        u_d = u_norm / m;
                        if a_total > 1e-12 {
                            u_a = -u_norm * raw / (m * m);
                        }
                    }
                    let p = Vector2::new(x as f64, y as f64);
                    // Reverse scan; g_t is the cotangent of the transmittance
                    // after the current splat.
                    let mut g_t = u_c.dot(&bg);
                    for item in row.items[lo..hi].iter().rev() {
                        let splat = &prepared[item.splat as usize];
                        let a = item.alpha;
                        let t = item.transmittance;
                        let coeff = u_c.dot(&splat.color) + u_d * splat.p_cam.z + u_a;
                        let d_alpha = t * (coeff - g_t);
                        g_t = coeff * a + g_t * (1.0 - a);

                        let slot = &mut acc[item.splat as usize];
                        let ta = t * a;
                        slot.dc += u_c * ta;
                        slot.dd += u_d * ta;
                        slot.hit = true;
                        // Through a = min(clamp, alpha * weight): zero once
                        // clamped.
                        if clamp.is_some_and(|c| a >= c) {
                            continue;
                        }
                        let weight = a / splat.alpha;
                        slot.da += d_alpha * weight;
                        let gq = -0.5 * splat.alpha * weight * d_alpha;
                        let d = p - splat.mu2d;
                        slot.v1 += gq * d;
                        slot.v2[0] += gq * d.x * d.x;
                        slot.v2[1] += gq * d.x * d.y;
                        slot.v2[2] += gq * d.y * d.y;
                    }
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![SplatAcc::default(); prepared.len()];
    for band in &bands {
        merge_accs(&mut acc, band);
    }

    // Finalize phase: one chain per contributing splat.
    let mut buffer = GradientBuffer::zeros(model);
    let per_splat: Vec<Option<SplatGrads>> = prepared
        .par_iter()
        .zip(acc.par_iter())
        .map(|(splat, acc)| acc.hit.then(|| finalize_splat(model, camera, opts, splat, acc)))
        .collect();
    for grads in per_splat.into_iter().flatten() {
        let i = grads.prim;
        buffer.d_position[i] += grads.d_position;
        buffer.d_z_raw[i] += grads.d_z_raw;
        buffer.d_log_scale[i] += grads.d_log_scale;
        buffer.d_rotation[i] += grads.d_rotation;
        buffer.d_opacity_logit[i] += grads.d_opacity_logit;
        for (a, b) in buffer.d_sh[i].iter_mut().zip(grads.d_sh.iter()) {
            *a += *b;
        }
        buffer.view_grad_norm[i] += grads.view_grad_norm;
        buffer.hits[i] += 1;
    }
    Ok(buffer)
}

struct SplatGrads {
    prim: usize,
    d_position: Vector3<f64>,
    d_z_raw: f64,
    d_log_scale: Vector3<f64>,
    d_rotation: Vector4<f64>,
    d_opacity_logit: f64,
    d_sh: Vec<Vector3<f64>>,
    view_grad_norm: f64,
}

fn finalize_splat(
    model: &HybridModel,
    camera: &Camera,
    opts: &super::RenderOptions,
    splat: &PreparedSplat,
    acc: &SplatAcc,
) -> SplatGrads {
    let prim = &model.primitives[splat.prim];
    let (fx, fy) = (camera.fx(), camera.fy());
    let p_cam = splat.p_cam;
    let z = p_cam.z;
    let s_inv = splat.inv_cov;

    // Gaussian-weight path: dL/dmu2d = -2 S v1, dL/dSigma' = -S V2 S.
    let d_mu2d = -2.0 * (s_inv * acc.v1);
    let v2 = Matrix2::new(acc.v2[0], acc.v2[1], acc.v2[1], acc.v2[2]);
    let d_cov2d = -(s_inv * v2 * s_inv);

    // Sigma' = M Sigma M^T + low_pass I, with M = J W.
    let w_mat = camera.world_to_cam_rotation();
    let scale = prim.scale();
    let sigma3d = covariance_3d_fast(&scale, &prim.rotation);
    let j = crate::model::pinhole_jacobian(fx, fy, &p_cam);
    let m = j * w_mat;
    let d_m = 2.0 * d_cov2d * m * sigma3d;
    let d_sigma3d = m.transpose() * d_cov2d * m;
    let d_j = d_m * w_mat.transpose();

    // Jacobian entries depend on the camera-space point.
    let z_inv2 = 1.0 / (z * z);
    let z_inv3 = z_inv2 / z;
    let mut d_p_cam = Vector3::new(
        d_j[(0, 2)] * (-fx * z_inv2),
        d_j[(1, 2)] * (-fy * z_inv2),
        d_j[(0, 0)] * (-fx * z_inv2)
            + d_j[(1, 1)] * (-fy * z_inv2)
            + d_j[(0, 2)] * (2.0 * fx * p_cam.x * z_inv3)
            + d_j[(1, 2)] * (2.0 * fy * p_cam.y * z_inv3),
    );
    // Projection of the mean.
    d_p_cam.x += d_mu2d.x * fx / z;
    d_p_cam.y += d_mu2d.y * fy / z;
    d_p_cam.z -= (d_mu2d.x * fx * p_cam.x + d_mu2d.y * fy * p_cam.y) * z_inv2;
    // Depth composite uses the camera-space z directly.
    d_p_cam.z += acc.dd;

    let mut d_pos = camera.rotation() * d_p_cam;

    // Spherical harmonics: clamped channels stop gradients; the view
    // direction depends on the world position.
    let degree = opts.sh_degree.min(model.sh_degree);
    let used = sh_coeff_count(degree);
    let coeffs = sh_coeff_count(model.sh_degree);
    let mut d_sh = vec![Vector3::zeros(); coeffs];
    let d_c = Vector3::new(
        if splat.color_raw.x > 0.0 { acc.dc.x } else { 0.0 },
        if splat.color_raw.y > 0.0 { acc.dc.y } else { 0.0 },
        if splat.color_raw.z > 0.0 { acc.dc.z } else { 0.0 },
    );
    let pos = model.position_of(splat.prim);
    let v = pos - camera.center();
    let r = v.norm();
    let dir = v / r;
    let basis = crate::model::sh::sh_basis(degree, &dir);
    let basis_grad = sh_basis_grad(degree, &dir);
    let mut d_dir = Vector3::zeros();
    for k in 0..used {
        d_sh[k] = d_c * basis[k];
        let coeff_dot = d_c.dot(&prim.sh[k]);
        d_dir += basis_grad[k] * coeff_dot;
    }
    // Through dir = v / |v|.
    d_pos += (d_dir - dir * dir.dot(&d_dir)) / r;

    // 3D covariance factorization Sigma = R diag(s^2) R^T.
    let rot = quat_to_rotation(&prim.rotation).expect("prepared splat has valid quaternion");
    let d_in_rot_frame = rot.transpose() * d_sigma3d * rot;
    let d_log_scale = Vector3::new(
        d_in_rot_frame[(0, 0)] * 2.0 * scale.x * scale.x,
        d_in_rot_frame[(1, 1)] * 2.0 * scale.y * scale.y,
        d_in_rot_frame[(2, 2)] * 2.0 * scale.z * scale.z,
    );
    let d_diag = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let d_rot_mat = 2.0 * d_sigma3d * rot * d_diag;
    let d_rotation = quat_rotation_backward(&prim.rotation, &d_rot_mat);

    let alpha = splat.alpha;
    let d_opacity_logit = acc.da * alpha * (1.0 - alpha);

    let (d_position, d_z_raw) = match prim.kind {
        PrimitiveKind::Free { .. } => (d_pos, 0.0),
        PrimitiveKind::RayBound { ray_index, z_raw } => {
            let d_z_act = model.rays[ray_index].direction.dot(&d_pos);
            (Vector3::zeros(), sigmoid(z_raw) * d_z_act)
        }
    };

    let view_grad_norm = Vector2::new(
        d_mu2d.x * 0.5 * camera.width as f64,
        d_mu2d.y * 0.5 * camera.height as f64,
    )
    .norm();

    SplatGrads {
        prim: splat.prim,
        d_position,
        d_z_raw,
        d_log_scale,
        d_rotation,
        d_opacity_logit,
        d_sh,
        view_grad_norm,
    }
}

fn covariance_3d_fast(scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Matrix3<f64> {
    let rot = quat_to_rotation(rotation).expect("prepared splat has valid quaternion");
    rot * Matrix3::from_diagonal(&scale.component_mul(scale)) * rot.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logit, softplus_inv, GaussianPrimitive};
    use crate::rasterizer::{render, RenderOptions};
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::from_fov(0, w, h, f, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    /// Random mixed scene; opacities stay below the clamp so alpha' never
    /// saturates, and SH coefficients are small enough that colors rarely
    /// sit at the clamp boundary.
    fn random_scene(rng: &mut StdRng, n_free: usize, n_bound: usize, sh_degree: u32) -> HybridModel {
        let coeffs = sh_coeff_count(sh_degree);
        let mut model = HybridModel::empty(sh_degree);
        for i in 0..n_free + n_bound {
            let kind = if i < n_free {
                PrimitiveKind::Free {
                    position: Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(1.0..4.0),
                    ),
                }
            } else {
                let ray = crate::geometry::Ray::new(
                    Vector3::new(
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.3..0.0),
                    ),
                    Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        1.0,
                    ),
                );
                model.rays.push(ray);
                PrimitiveKind::RayBound {
                    ray_index: model.rays.len() - 1,
                    z_raw: softplus_inv(rng.random_range(1.0..4.0)),
                }
            };
            let mut sh = vec![Vector3::zeros(); coeffs];
            for c in sh.iter_mut() {
                *c = Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                );
            }
            model.primitives.push(GaussianPrimitive {
                kind,
                log_scale: Vector3::new(
                    rng.random_range(-2.5..-1.0),
                    rng.random_range(-2.5..-1.0),
                    rng.random_range(-2.5..-1.0),
                ),
                rotation: Vector4::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                opacity_logit: logit(rng.random_range(0.2..0.8)),
                sh,
            });
            model.active.push(true);
        }
        model
    }

    /// Scalar test loss: sum of all color channels plus sum of depth.
    fn scalar_loss(model: &HybridModel, camera: &Camera, opts: &RenderOptions) -> f64 {
        let out = render(model, camera, opts);
        let c: f64 = out.color.data.iter().map(|p| p.x + p.y + p.z).sum();
        let d: f64 = out.depth.data.iter().sum();
        c + d
    }

    fn analytic_gradients(
        model: &HybridModel,
        camera: &Camera,
        opts: &RenderOptions,
    ) -> GradientBuffer {
        let mut o = opts.clone();
        o.retain_for_backward = true;
        let out = render(model, camera, &o);
        let ones_c = Image::filled(camera.width, camera.height, Vector3::new(1.0, 1.0, 1.0));
        let mut ones_d = ScalarImage::new(camera.width, camera.height);
        ones_d.data.fill(1.0);
        render_backward(model, camera, &out, &ones_c, &ones_d).unwrap()
    }

    fn check_grad(analytic: f64, fd: f64, what: &str) {
        let abs = (analytic - fd).abs();
        let rel = abs / fd.abs().max(1e-12);
        assert!(
            abs < 1e-4 || rel < 1e-3,
            "{what}: analytic {analytic:.8e} vs fd {fd:.8e} (abs {abs:.2e}, rel {rel:.2e})"
        );
    }

    #[test]
    fn zero_upstream_gives_zero_buffer() {
        let mut rng = StdRng::seed_from_u64(1);
        let model = random_scene(&mut rng, 2, 1, 1);
        let cam = test_camera(12, 12, 14.0);
        let mut opts = RenderOptions::exact();
        opts.retain_for_backward = true;
        opts.sh_degree = 1;
        let out = render(&model, &cam, &opts);
        let zc = Image::new(12, 12);
        let zd = ScalarImage::new(12, 12);
        let buf = render_backward(&model, &cam, &out, &zc, &zd).unwrap();
        assert!(buf.d_position.iter().all(|v| v.norm() == 0.0));
        assert!(buf.d_z_raw.iter().all(|&v| v == 0.0));
        assert!(buf.d_opacity_logit.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_record_is_an_error() {
        let mut rng = StdRng::seed_from_u64(2);
        let model = random_scene(&mut rng, 1, 0, 0);
        let cam = test_camera(8, 8, 10.0);
        let out = render(&model, &cam, &RenderOptions::default());
        let zc = Image::new(8, 8);
        let zd = ScalarImage::new(8, 8);
        assert!(matches!(
            render_backward(&model, &cam, &out, &zc, &zd),
            Err(BackwardError::MissingContributorRecord)
        ));
    }

    #[test]
    fn opacity_gradient_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(3);
        let model = random_scene(&mut rng, 3, 0, 0);
        let cam = test_camera(16, 16, 18.0);
        let mut opts = RenderOptions::exact();
        opts.sh_degree = 0;
        let buf = analytic_gradients(&model, &cam, &opts);
        let h = 1e-4;
        for i in 0..model.len() {
            let mut mp = model.clone();
            let mut mm = model.clone();
            mp.primitives[i].opacity_logit += h;
            mm.primitives[i].opacity_logit -= h;
            let fd = (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
            check_grad(buf.d_opacity_logit[i], fd, &format!("opacity[{i}]"));
        }
    }

    #[test]
    fn z_gradient_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(4);
        let model = random_scene(&mut rng, 1, 3, 1);
        let cam = test_camera(16, 16, 18.0);
        let mut opts = RenderOptions::exact();
        opts.sh_degree = 1;
        let buf = analytic_gradients(&model, &cam, &opts);
        let h = 1e-5;
        for i in 0..model.len() {
            let PrimitiveKind::RayBound { z_raw, .. } = model.primitives[i].kind else {
                continue;
            };
            let mut mp = model.clone();
            let mut mm = model.clone();
            if let PrimitiveKind::RayBound { z_raw: zp, .. } = &mut mp.primitives[i].kind {
                *zp = z_raw + h;
            }
            if let PrimitiveKind::RayBound { z_raw: zm, .. } = &mut mm.primitives[i].kind {
                *zm = z_raw - h;
            }
            let fd = (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
            check_grad(buf.d_z_raw[i], fd, &format!("z_raw[{i}]"));
        }
    }

    #[test]
    fn all_attribute_gradients_match_on_one_scene() {
        let mut rng = StdRng::seed_from_u64(5);
        let model = random_scene(&mut rng, 2, 2, 2);
        let cam = test_camera(14, 14, 16.0);
        let mut opts = RenderOptions::exact();
        opts.sh_degree = 2;
        let buf = analytic_gradients(&model, &cam, &opts);
        let h = 1e-5;
        for i in 0..model.len() {
            // Position (free only).
            if let PrimitiveKind::Free { position } = model.primitives[i].kind {
                for axis in 0..3 {
                    let mut mp = model.clone();
                    let mut mm = model.clone();
                    let mut pp = position;
                    let mut pm = position;
                    pp[axis] += h;
                    pm[axis] -= h;
                    mp.primitives[i].kind = PrimitiveKind::Free { position: pp };
                    mm.primitives[i].kind = PrimitiveKind::Free { position: pm };
                    let fd =
                        (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
                    check_grad(buf.d_position[i][axis], fd, &format!("pos[{i}][{axis}]"));
                }
            }
            // Log-scale.
            for axis in 0..3 {
                let mut mp = model.clone();
                let mut mm = model.clone();
                mp.primitives[i].log_scale[axis] += h;
                mm.primitives[i].log_scale[axis] -= h;
                let fd = (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
                check_grad(buf.d_log_scale[i][axis], fd, &format!("scale[{i}][{axis}]"));
            }
            // Quaternion.
            for k in 0..4 {
                let mut mp = model.clone();
                let mut mm = model.clone();
                mp.primitives[i].rotation[k] += h;
                mm.primitives[i].rotation[k] -= h;
                let fd = (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
                check_grad(buf.d_rotation[i][k], fd, &format!("quat[{i}][{k}]"));
            }
            // SH coefficients (a subset per primitive keeps this fast).
            for k in [0usize, 1, 4] {
                if k >= model.primitives[i].sh.len() {
                    continue;
                }
                for ch in 0..3 {
                    let mut mp = model.clone();
                    let mut mm = model.clone();
                    mp.primitives[i].sh[k][ch] += h;
                    mm.primitives[i].sh[k][ch] -= h;
                    let fd =
                        (scalar_loss(&mp, &cam, &opts) - scalar_loss(&mm, &cam, &opts)) / (2.0 * h);
                    check_grad(buf.d_sh[i][k][ch], fd, &format!("sh[{i}][{k}][{ch}]"));
                }
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let mut rng = StdRng::seed_from_u64(7);
        let model = random_scene(&mut rng, 8, 4, 2);
        let cam = test_camera(33, 29, 30.0);
        let mut opts = RenderOptions::default();
        opts.retain_for_backward = true;
        opts.sh_degree = 2;
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let out = render(&model, &cam, &opts);
                let dc = Image::filled(cam.width, cam.height, Vector3::new(0.3, -0.2, 0.9));
                let mut dd = ScalarImage::new(cam.width, cam.height);
                dd.data.fill(0.7);
                let buf = render_backward(&model, &cam, &out, &dc, &dd).unwrap();
                (out, buf)
            })
        };
        let (out1, buf1) = run(1);
        let (out4, buf4) = run(4);
        assert_eq!(out1.color.data, out4.color.data);
        assert_eq!(out1.depth.data, out4.depth.data);
        assert_eq!(out1.alpha.data, out4.alpha.data);
        assert_eq!(buf1.d_position, buf4.d_position);
        assert_eq!(buf1.d_z_raw, buf4.d_z_raw);
        assert_eq!(buf1.d_log_scale, buf4.d_log_scale);
        assert_eq!(buf1.d_rotation, buf4.d_rotation);
        assert_eq!(buf1.d_opacity_logit, buf4.d_opacity_logit);
        assert_eq!(buf1.d_sh, buf4.d_sh);
    }

    #[test]
    fn normalized_depth_gradients_match() {
        let mut rng = StdRng::seed_from_u64(6);
        let model = random_scene(&mut rng, 3, 1, 0);
        let cam = test_camera(12, 12, 14.0);
        let mut opts = RenderOptions::exact();
        opts.sh_degree = 0;
        opts.normalize_depth = true;
        // Depth-only loss through the normalized composite.
        let loss = |m: &HybridModel| -> f64 {
            render(m, &cam, &opts).depth.data.iter().sum()
        };
        let mut ro = opts.clone();
        ro.retain_for_backward = true;
        let out = render(&model, &cam, &ro);
        let zc = Image::new(12, 12);
        let mut ones_d = ScalarImage::new(12, 12);
        ones_d.data.fill(1.0);
        let buf = render_backward(&model, &cam, &out, &zc, &ones_d).unwrap();
        let h = 1e-5;
        for i in 0..model.len() {
            let mut mp = model.clone();
            let mut mm = model.clone();
            mp.primitives[i].opacity_logit += h;
            mm.primitives[i].opacity_logit -= h;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            check_grad(buf.d_opacity_logit[i], fd, &format!("norm-depth opacity[{i}]"));
        }
    }
}
