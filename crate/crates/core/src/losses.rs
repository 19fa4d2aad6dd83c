//! Training objectives: photometric L1 + SSIM, the Gaussian position loss
//! (reprojection error of ray-bound pair positions), the rendering geometry
//! loss (reprojection error of points lifted from rendered depth) and their
//! weighted total with the iteration schedule.

use crate::geometry::{self, Camera, EPS_DEPTH};
use crate::img::{Image, ScalarImage};
use crate::matching::MatchSet;
use crate::metrics;
use crate::model::{pinhole_jacobian, sigmoid, HybridModel, PrimitiveKind};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum LossError {
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

/// Penalty for a pair whose projection falls behind the partner camera: a
/// fixed pixel cost plus a hinge on the camera depth, whose gradient pushes
/// the point back toward the visible region.
const BEHIND_PENALTY_PX: f64 = 100.0;
const BEHIND_HINGE_WEIGHT: f64 = 10.0;

/// Pairs sampling a rendered pixel with accumulated alpha below this are
/// skipped by the rendering geometry loss.
pub const RG_ALPHA_SKIP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// SSIM mix in the photometric loss.
    pub lambda: f64,
    /// Position-loss weight.
    pub beta: f64,
    /// Geometry-loss weight once enabled by the schedule.
    pub delta: f64,
    /// Filter threshold in pixels.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            beta: 1.0,
            delta: 0.3,
            eta: 10.0,
        }
    }
}

/// The geometry-loss weight is zero before `delta_start` iterations and
/// `weights.delta` afterwards.
pub fn delta_at(iter: usize, delta_start: usize, weights: &LossWeights) -> f64 {
    if iter < delta_start {
        0.0
    } else {
        weights.delta
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub total: f64,
    pub photo: f64,
    pub l1: f64,
    pub ssim_term: f64,
    pub gp: f64,
    pub rg: f64,
    pub beta: f64,
    pub delta: f64,
    /// Per-pair position loss, aligned with the model's pair table; feeds
    /// the cache and the filter.
    pub per_pair_gp: Vec<f64>,
}

/// Combine the loss parts under the schedule at `iter`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    iter: usize,
    delta_start: usize,
    weights: &LossWeights,
    photo: f64,
    l1: f64,
    ssim_term: f64,
    gp: f64,
    per_pair_gp: Vec<f64>,
    rg: f64,
) -> LossReport {
    let beta = weights.beta;
    let delta = delta_at(iter, delta_start, weights);
    LossReport {
        total: photo + beta * gp + delta * rg,
        photo,
        l1,
        ssim_term,
        gp,
        rg,
        beta,
        delta,
        per_pair_gp,
    }
}

/// Photometric loss `(1 - lambda) L1 + lambda (1 - SSIM)`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<f64, LossError> {
    let (loss, ..) = photometric_loss_with_grad(rendered, target, lambda, false)?;
    Ok(loss)
}

/// Photometric loss with its gradient w.r.t. the rendered image. Returns
/// `(loss, l1, ssim_term, grad)`; the gradient is only populated when
/// `with_grad` is set.
pub fn photometric_loss_with_grad(
    rendered: &Image,
    target: &Image,
    lambda: f64,
    with_grad: bool,
) -> Result<(f64, f64, f64, Image), LossError> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(LossError::ShapeMismatch);
    }
    let n = (rendered.data.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = Image::new(rendered.width, rendered.height);
    for (i, (r, t)) in rendered.data.iter().zip(target.data.iter()).enumerate() {
        let d = r - t;
        l1 += d.x.abs() + d.y.abs() + d.z.abs();
        if with_grad {
            grad.data[i] = Vector3::new(d.x.signum(), d.y.signum(), d.z.signum()) * (1.0 - lambda) / n;
        }
    }
    l1 /= n;
    let (ssim_val, ssim_grad) = if with_grad {
        metrics::ssim_with_grad(rendered, target)?
    } else {
        (metrics::ssim(rendered, target)?, Image::new(1, 1))
    };
    let ssim_term = 1.0 - ssim_val;
    if with_grad {
        for (g, sg) in grad.data.iter_mut().zip(ssim_grad.data.iter()) {
            *g -= *sg * lambda;
        }
    }
    let loss = (1.0 - lambda) * l1 + lambda * ssim_term;
    Ok((loss, l1, ssim_term, grad))
}

/// One directional reprojection term: pixel distance between `target_px` and
/// the projection of `point` into `camera`, with the behind-camera penalty.
/// Also returns `dterm/dpoint` (world frame) when requested.
fn reprojection_term(
    camera: &Camera,
    point: &Vector3<f64>,
    target_px: &Vector2<f64>,
    with_grad: bool,
) -> (f64, Vector3<f64>) {
    let w = camera.world_to_cam_rotation();
    let p_cam = w * (point - camera.center());
    if p_cam.z <= EPS_DEPTH {
        // Hinge pushes the camera-space depth up; pi itself is undefined here.
        let term = BEHIND_PENALTY_PX + BEHIND_HINGE_WEIGHT * (EPS_DEPTH - p_cam.z);
        let grad = if with_grad {
            // d(-hinge_w * z_cam)/d point = -hinge_w * (third row of W)^T
            -BEHIND_HINGE_WEIGHT * w.row(2).transpose()
        } else {
            Vector3::zeros()
        };
        return (term, grad);
    }
    let proj = Vector2::new(
        camera.fx() * p_cam.x / p_cam.z + camera.cx(),
        camera.fy() * p_cam.y / p_cam.z + camera.cy(),
    );
    let e = target_px - proj;
    let norm = e.norm();
    if !with_grad || norm < 1e-12 {
        return (norm, Vector3::zeros());
    }
    // d|e|/dproj = -e/|e|, then through the pinhole Jacobian and W.
    let d_proj = -e / norm;
    let j = pinhole_jacobian(camera.fx(), camera.fy(), &p_cam);
    let d_p_cam = j.transpose() * d_proj;
    (norm, w.transpose() * d_p_cam)
}

/// Gaussian position loss over active ray-bound pairs: for each pair, the
/// two directional reprojection errors of the primitives' 3D positions into
/// the partner views. Returns the mean over directional terms and the
/// per-pair means (computed for every pair, active or not).
pub fn gaussian_position_loss(
    model: &HybridModel,
    cameras: &[Camera],
    matches: &MatchSet,
) -> (f64, Vec<f64>) {
    let (total, per_pair, _) = gaussian_position_loss_impl(model, cameras, matches, false);
    (total, per_pair)
}

/// As [`gaussian_position_loss`], also returning `d(loss)/d(z_raw)` per
/// primitive (zero for free primitives), including the mean normalization.
pub fn gaussian_position_loss_with_grad(
    model: &HybridModel,
    cameras: &[Camera],
    matches: &MatchSet,
) -> (f64, Vec<f64>, Vec<f64>) {
    gaussian_position_loss_impl(model, cameras, matches, true)
}

fn gaussian_position_loss_impl(
    model: &HybridModel,
    cameras: &[Camera],
    matches: &MatchSet,
    with_grad: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut per_pair = vec![0.0; model.pair_table.len()];
    let mut d_z = vec![0.0; model.len()];
    let mut active_sum = 0.0;
    let mut active_terms = 0usize;
    // (prim, dterm/dz_raw) entries from active pairs, scaled afterwards.
    let mut grads: Vec<(usize, f64)> = Vec::new();
    for (k, entry) in model.pair_table.iter().enumerate() {
        let m = &matches.pairs[entry.match_index];
        let cam_i = geometry::camera_by_id(cameras, m.view_i).expect("pair references known view");
        let cam_j = geometry::camera_by_id(cameras, m.view_j).expect("pair references known view");
        let active = model.active[entry.prim_i] && model.active[entry.prim_j];

        let mut directional = |prim_idx: usize, cam: &Camera, target: &Vector2<f64>| -> f64 {
            let pos = model.position_of(prim_idx);
            let (term, d_point) = reprojection_term(cam, &pos, target, with_grad && active);
            if with_grad && active {
                if let PrimitiveKind::RayBound { ray_index, z_raw } = model.primitives[prim_idx].kind {
                    let d_z_act = model.rays[ray_index].direction.dot(&d_point);
                    grads.push((prim_idx, d_z_act * sigmoid(z_raw)));
                }
            }
            term
        };

        // i -> j: project primitive i into view j against p_j, and vice
        // versa.
        let t_ij = directional(entry.prim_i, cam_j, &m.p_j);
        let t_ji = directional(entry.prim_j, cam_i, &m.p_i);
        per_pair[k] = 0.5 * (t_ij + t_ji);
        if active {
            active_sum += t_ij + t_ji;
            active_terms += 2;
        }
    }
    let total = if active_terms > 0 {
        active_sum / active_terms as f64
    } else {
        0.0
    };
    if with_grad && active_terms > 0 {
        let scale = 1.0 / active_terms as f64;
        for (prim, g) in grads {
            d_z[prim] += g * scale;
        }
    }
    (total, per_pair, d_z)
}

/// One scattered gradient contribution: (view slot, x, y, value).
type ScatterEntry = (usize, usize, usize, f64);

/// Per-view inputs to the rendering geometry loss.
pub struct ViewGeometry<'a> {
    pub view_id: u32,
    pub depth: &'a ScalarImage,
    pub alpha: &'a ScalarImage,
}

/// Rendering geometry loss: bilinearly sample the rendered depth at each
/// matched pixel, lift to 3D, project into the partner view and penalize the
/// pixel error; symmetric over both directions, averaged over included
/// directional terms. Pairs are skipped when either endpoint samples a pixel
/// with accumulated alpha below [`RG_ALPHA_SKIP`], a non-positive depth, or
/// a lift that lands behind the partner camera. Returns the loss and
/// `d(loss)/d(depth map)` per view, aligned with `views`.
pub fn rendering_geometry_loss(
    model: &HybridModel,
    cameras: &[Camera],
    matches: &MatchSet,
    views: &[ViewGeometry<'_>],
) -> (f64, Vec<ScalarImage>) {
    let view_slot = |id: u32| views.iter().position(|v| v.view_id == id);
    let mut grads: Vec<ScalarImage> = views
        .iter()
        .map(|v| ScalarImage::new(v.depth.width, v.depth.height))
        .collect();
    // Applied after the mean normalization is known.
    let mut entries: Vec<ScatterEntry> = Vec::new();
    let mut sum = 0.0;
    let mut terms = 0usize;
    for (_, entry) in model.active_pairs() {
        let m = &matches.pairs[entry.match_index];
        let (Some(slot_i), Some(slot_j)) = (view_slot(m.view_i), view_slot(m.view_j)) else {
            continue;
        };
        let cam_i = geometry::camera_by_id(cameras, m.view_i).expect("known view");
        let cam_j = geometry::camera_by_id(cameras, m.view_j).expect("known view");

        let directional = |slot: usize,
                               cam_from: &Camera,
                               cam_to: &Camera,
                               p_from: &Vector2<f64>,
                               p_to: &Vector2<f64>|
         -> Option<(f64, Vec<ScatterEntry>)> {
            let v = &views[slot];
            if v.alpha.sample_bilinear(p_from.x, p_from.y) < RG_ALPHA_SKIP {
                return None;
            }
            let depth = v.depth.sample_bilinear(p_from.x, p_from.y);
            if depth <= EPS_DEPTH {
                return None;
            }
            let lifted = geometry::lift_pixel(cam_from, p_from, depth).ok()?;
            let p_cam = cam_to.world_to_cam(&lifted);
            if p_cam.z <= EPS_DEPTH {
                return None;
            }
            let (term, d_point) = reprojection_term(cam_to, &lifted, p_to, true);
            // d(lifted)/d(depth) is the fixed lifting direction.
            let dir = cam_from.rotation()
                * Vector3::new(
                    (p_from.x - cam_from.cx()) / cam_from.fx(),
                    (p_from.y - cam_from.cy()) / cam_from.fy(),
                    1.0,
                );
            let d_depth = d_point.dot(&dir);
            let scatter = v
                .depth
                .bilinear_footprint(p_from.x, p_from.y)
                .iter()
                .map(|&(x, y, w)| (slot, x, y, w * d_depth))
                .collect();
            Some((term, scatter))
        };

        let dir_ij = directional(slot_i, cam_i, cam_j, &m.p_i, &m.p_j);
        let dir_ji = directional(slot_j, cam_j, cam_i, &m.p_j, &m.p_i);
        // Skip the whole pair unless both directions are valid.
        let (Some((t_ij, s_ij)), Some((t_ji, s_ji))) = (dir_ij, dir_ji) else {
            continue;
        };
        sum += t_ij + t_ji;
        terms += 2;
        entries.extend(s_ij);
        entries.extend(s_ji);
    }
    if terms == 0 {
        return (0.0, grads);
    }
    let scale = 1.0 / terms as f64;
    for (slot, x, y, g) in entries {
        let w = grads[slot].width;
        grads[slot].data[y * w + x] += g * scale;
    }
    (sum / terms as f64, grads)
}
