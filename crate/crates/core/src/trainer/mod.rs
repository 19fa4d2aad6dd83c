//! End-to-end optimization: hybrid initialization from matches, the training
//! loop with per-attribute learning rates, the ray-distance caching window,
//! match filtering, and densification of free primitives.

pub mod adam;

use crate::geometry::{self, Camera, Ray};
use crate::img::{Image, ScalarImage};
use crate::losses::{self, LossReport, LossWeights, ViewGeometry};
use crate::matching::{self, MatchSet};
use crate::model::{
    self, logit, softplus_inv, GaussianPrimitive, HybridModel, PairEntry, PrimitiveKind,
};
use crate::rasterizer::{self, GradientBuffer, RenderOptions};
use adam::{Adam, AdamParams, PrimMoments};
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("match set is empty")]
    EmptyMatchSet,
    #[error("need at least 2 training views with matches, got {0}")]
    TooFewViews(usize),
    #[error("config violates an invariant (weights in range, positive learning rates, cache window <= iterations)")]
    InvalidConfig,
    #[error("match references view {0} absent from the training cameras")]
    UnknownView(u32),
    #[error("non-finite loss at iteration {iter} (photo {photo:.4e}, gp {gp:.4e}, rg {rg:.4e})")]
    NonFiniteLoss { iter: usize, photo: f64, gp: f64, rg: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] model::checkpoint::CheckpointError),
    #[error("backward error: {0}")]
    Backward(#[from] rasterizer::BackwardError),
    #[error("loss error: {0}")]
    Loss(#[from] losses::LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub z_start: f64,
    pub z_end: f64,
    /// Free-position rate, scaled by the scene extent.
    pub position_start: f64,
    pub position_end: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    /// Higher SH bands run at `sh_dc / sh_rest_div`.
    pub sh_rest_div: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            z_start: 0.1,
            z_end: 1.6e-6,
            position_start: 1.6e-4,
            position_end: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest_div: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Densify every this many iterations (0 disables).
    pub interval: usize,
    /// First iteration at which densification may run.
    pub start_iter: usize,
    /// Mean view-space gradient above this marks a primitive for cloning or
    /// splitting.
    pub grad_threshold: f64,
    /// Split (rather than clone) when the largest activated scale exceeds
    /// this fraction of the scene extent.
    pub split_extent_fraction: f64,
    pub split_scale_div: f64,
    /// Free primitives below this activated opacity are pruned.
    pub prune_opacity: f64,
    /// Hard cap on the primitive count (additions stop there).
    pub max_primitives: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start_iter: 500,
            grad_threshold: 2e-4,
            split_extent_fraction: 0.01,
            split_scale_div: 1.6,
            prune_opacity: 0.005,
            max_primitives: 50_000,
        }
    }
}

/// How ray distances are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZInit {
    /// Log-uniform over `[0.2 near, 2 far]` of the triangulated depth range.
    LogUniform,
    /// At the triangulated intersection (test mode for oracle checks).
    Triangulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Ray distances are cached over the first `cache_window` iterations and
    /// restored (plus filtered) at its end.
    pub cache_window: usize,
    pub weights: LossWeights,
    /// Weight on the photometric term; 0 trains on structure losses alone.
    pub photo_weight: f64,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub sh_degree: u32,
    pub sh_promote_interval: usize,
    /// After the cache window, re-apply the filter every this many
    /// iterations (0 disables re-checking).
    pub filter_recheck_interval: usize,
    /// Cache a global snapshot of all ray distances at the minimum total
    /// position loss instead of per-primitive minima.
    pub cache_snapshot: bool,
    pub z_init: ZInit,
    /// Feed alpha-normalized depth to the geometry loss.
    pub normalize_depth_for_rg: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = &self.weights;
        let lr = &self.lr;
        let ok = self.cache_window <= self.iterations
            && (0.0..=1.0).contains(&w.lambda)
            && w.beta >= 0.0
            && w.delta >= 0.0
            && w.eta >= 0.0
            && self.photo_weight >= 0.0
            && [
                lr.z_start,
                lr.z_end,
                lr.position_start,
                lr.position_end,
                lr.log_scale,
                lr.rotation,
                lr.opacity,
                lr.sh_dc,
                lr.sh_rest_div,
            ]
            .iter()
            .all(|&v| v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig)
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            cache_window: 1000,
            weights: LossWeights::default(),
            photo_weight: 1.0,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            sh_degree: 3,
            sh_promote_interval: 1000,
            filter_recheck_interval: 500,
            cache_snapshot: false,
            z_init: ZInit::LogUniform,
            normalize_depth_for_rg: false,
            seed: 0,
        }
    }
}

/// Per-primitive cache of the best ray distance seen during the window.
#[derive(Debug, Clone)]
pub struct CacheState {
    pub best_z_raw: Vec<f64>,
    pub best_loss: Vec<f64>,
    best_total: f64,
    snapshot_z: Vec<f64>,
}

impl CacheState {
    fn new(n: usize) -> Self {
        Self {
            best_z_raw: vec![0.0; n],
            best_loss: vec![f64::INFINITY; n],
            best_total: f64::INFINITY,
            snapshot_z: vec![0.0; n],
        }
    }
}

/// Build the hybrid model from matches: one pair of ray-bound primitives per
/// correspondence, bound to the pixel rays of its two endpoints.
pub fn init_hybrid(
    matches: &MatchSet,
    cameras: &[Camera],
    images: &[Image],
    config: &TrainConfig,
) -> Result<HybridModel, TrainError> {
    if matches.is_empty() {
        return Err(TrainError::EmptyMatchSet);
    }
    let cam_of = |id: u32| geometry::camera_by_id(cameras, id).ok_or(TrainError::UnknownView(id));
    let image_of = |id: u32| -> Result<&Image, TrainError> {
        let idx = cameras
            .iter()
            .position(|c| c.id == id)
            .ok_or(TrainError::UnknownView(id))?;
        Ok(&images[idx])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ca1ab1e);
    let coeffs = model::sh_coeff_count(config.sh_degree);

    // Triangulated depth per ray, used both for the Triangulated init mode
    // and for the log-uniform sampling range.
    struct PairRays {
        ray_i: Ray,
        ray_j: Ray,
        z_i: Option<f64>,
        z_j: Option<f64>,
    }
    let mut pair_rays = Vec::with_capacity(matches.len());
    let mut depths: Vec<f64> = Vec::new();
    for m in &matches.pairs {
        let cam_i = cam_of(m.view_i)?;
        let cam_j = cam_of(m.view_j)?;
        let ray_i = geometry::ray_from_pixel(cam_i, &m.p_i);
        let ray_j = geometry::ray_from_pixel(cam_j, &m.p_j);
        let (z_i, z_j) = match geometry::triangulate(&ray_i, &ray_j) {
            Ok((point, _)) => {
                let zi = (point - ray_i.origin).dot(&ray_i.direction);
                let zj = (point - ray_j.origin).dot(&ray_j.direction);
                if zi > 1e-3 && zj > 1e-3 {
                    depths.push(zi);
                    depths.push(zj);
                    (Some(zi), Some(zj))
                } else {
                    (None, None)
                }
            }
            Err(_) => (None, None),
        };
        pair_rays.push(PairRays {
            ray_i,
            ray_j,
            z_i,
            z_j,
        });
    }
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (near, far) = if depths.is_empty() {
        let baseline = cameras
            .iter()
            .flat_map(|a| cameras.iter().map(move |b| (a.center() - b.center()).norm()))
            .fold(0.0f64, f64::max)
            .max(1e-3);
        (0.5 * baseline, 10.0 * baseline)
    } else {
        (
            depths[depths.len() / 20].max(1e-3),
            depths[depths.len() - 1 - depths.len() / 20].max(1e-2),
        )
    };
    let z_lo = (0.2 * near).max(1e-3);
    let z_hi = (2.0 * far).max(z_lo * 1.01);

    let mut primitives = Vec::with_capacity(matches.len() * 2);
    let mut rays = Vec::with_capacity(matches.len() * 2);
    let mut pair_table = Vec::with_capacity(matches.len());
    for (k, (m, pr)) in matches.pairs.iter().zip(pair_rays.iter()).enumerate() {
        let mut sample_z = |tri: Option<f64>| -> f64 {
            match config.z_init {
                ZInit::Triangulated => tri.unwrap_or_else(|| {
                    (z_lo * (z_hi / z_lo).powf(rng.random_range(0.0..1.0))).max(1e-3)
                }),
                ZInit::LogUniform => z_lo * (z_hi / z_lo).powf(rng.random_range(0.0..1.0)),
            }
        };
        let z_i = sample_z(pr.z_i);
        let z_j = sample_z(pr.z_j);
        let img_i = image_of(m.view_i)?;
        let img_j = image_of(m.view_j)?;
        for (ray, z, img, p) in [
            (pr.ray_i, z_i, img_i, m.p_i),
            (pr.ray_j, z_j, img_j, m.p_j),
        ] {
            rays.push(ray);
            let color = img.sample_bilinear(p.x, p.y);
            let mut sh = vec![Vector3::zeros(); coeffs];
            sh[0] = (color - Vector3::new(0.5, 0.5, 0.5)) / model::SH_C0;
            primitives.push(GaussianPrimitive {
                kind: PrimitiveKind::RayBound {
                    ray_index: rays.len() - 1,
                    z_raw: softplus_inv(z),
                },
                log_scale: Vector3::zeros(),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                opacity_logit: logit(0.1),
                sh,
            });
        }
        pair_table.push(PairEntry {
            prim_i: 2 * k,
            prim_j: 2 * k + 1,
            match_index: k,
        });
    }
    let n = primitives.len();
    let mut model = HybridModel {
        primitives,
        rays,
        pair_table,
        active: vec![true; n],
        sh_degree: config.sh_degree,
    };

    // Isotropic scale from the mean nearest-neighbor distance among the
    // initial positions.
    let positions: Vec<Vector3<f64>> = (0..n).map(|i| model.position_of(i)).collect();
    let mut nn_sum = 0.0;
    for (i, p) in positions.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in positions.iter().enumerate() {
            if i != j {
                best = best.min((p - q).norm_squared());
            }
        }
        if best.is_finite() {
            nn_sum += best.sqrt();
        }
    }
    let mean_nn = (nn_sum / n.max(1) as f64).clamp(1e-4, 1e3);
    let log_scale = mean_nn.ln();
    for prim in &mut model.primitives {
        prim.log_scale = Vector3::new(log_scale, log_scale, log_scale);
    }
    Ok(model)
}

/// Owns the model and every piece of optimizer state for one training run.
pub struct Trainer {
    pub model: HybridModel,
    pub config: TrainConfig,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub matches: MatchSet,
    pub cache: CacheState,
    adam: Adam,
    moments: Vec<PrimMoments>,
    grad_acc: Vec<f64>,
    hit_acc: Vec<u32>,
    rng: ChaCha8Rng,
    scene_extent: f64,
    pub active_sh_degree: u32,
}

impl Trainer {
    /// Build a trainer over training views (cameras and images aligned by
    /// index) and their matches.
    pub fn new(
        cameras: Vec<Camera>,
        images: Vec<Image>,
        matches: MatchSet,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if cameras.len() < 2 {
            return Err(TrainError::TooFewViews(cameras.len()));
        }
        config.validate()?;
        let model = init_hybrid(&matches, &cameras, &images, &config)?;
        let n = model.len();
        let coeffs = model::sh_coeff_count(config.sh_degree);
        // Scene extent: bounding radius of camera centers and primitive
        // positions around their centroid.
        let mut points: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
        points.extend((0..n).map(|i| model.position_of(i)));
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let scene_extent = points
            .iter()
            .map(|p| (p - centroid).norm())
            .fold(0.0f64, f64::max)
            .max(1e-3);
        let cache = CacheState::new(n);
        Ok(Self {
            model,
            adam: Adam::new(AdamParams::default()),
            moments: vec![PrimMoments::new(coeffs); n],
            cache,
            grad_acc: vec![0.0; n],
            hit_acc: vec![0; n],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scene_extent,
            active_sh_degree: 0,
            cameras,
            images,
            matches,
            config,
        })
    }

    pub fn scene_extent(&self) -> f64 {
        self.scene_extent
    }

    /// The exponentially interpolated ray-distance learning rate at an
    /// iteration: `z_start` at 0 down to `z_end` at the final iteration.
    pub fn z_lr_at(&self, iter: usize) -> f64 {
        let lr = &self.config.lr;
        interp_lr(lr.z_start, lr.z_end, iter, self.config.iterations)
    }

    fn position_lr_at(&self, iter: usize) -> f64 {
        let lr = &self.config.lr;
        self.scene_extent * interp_lr(lr.position_start, lr.position_end, iter, self.config.iterations)
    }

    fn structure_enabled(&self) -> bool {
        self.config.weights.beta > 0.0
    }

    /// One optimization step. Renders every training view, accumulates the
    /// loss gradients, applies Adam, and runs the cache / filter / densify
    /// bookkeeping scheduled at this iteration.
    pub fn step(&mut self, iter: usize) -> Result<LossReport, TrainError> {
        self.active_sh_degree = (iter / self.config.sh_promote_interval.max(1)) as u32;
        self.active_sh_degree = self.active_sh_degree.min(self.config.sh_degree);

        // Cache restore and filtering happen before the loss evaluation so
        // this iteration already trains the filtered model.
        if self.structure_enabled() {
            if iter == self.config.cache_window {
                self.restore_cached_z();
            }
            let recheck = self.config.filter_recheck_interval;
            let filter_now = iter == self.config.cache_window
                || (recheck > 0 && iter > self.config.cache_window && iter.is_multiple_of(recheck));
            if filter_now {
                let (_, per_pair) =
                    losses::gaussian_position_loss(&self.model, &self.cameras, &self.matches);
                matching::filter_pairs(&mut self.model, &per_pair, self.config.weights.eta);
            }
        }

        let (gp, per_pair_gp, d_z_gp) =
            losses::gaussian_position_loss_with_grad(&self.model, &self.cameras, &self.matches);

        // Cache update against the loss evaluated at the current distances.
        if self.structure_enabled() && iter < self.config.cache_window {
            self.update_cache(gp, &per_pair_gp);
        }

        let delta = losses::delta_at(iter, self.config.cache_window, &self.config.weights);
        let beta = self.config.weights.beta;
        let render_needed = self.config.photo_weight > 0.0 || delta > 0.0;

        let mut photo_raw = 0.0;
        let mut l1 = 0.0;
        let mut ssim_term = 0.0;
        let mut rg = 0.0;
        let mut buffer = GradientBuffer::zeros(&self.model);

        if render_needed {
            let opts = RenderOptions {
                sh_degree: self.active_sh_degree,
                retain_for_backward: true,
                normalize_depth: self.config.normalize_depth_for_rg,
                ..RenderOptions::default()
            };
            let outputs: Vec<rasterizer::RenderOutput> = self
                .cameras
                .iter()
                .map(|cam| rasterizer::render(&self.model, cam, &opts))
                .collect();
            let n_views = self.cameras.len() as f64;
            let mut d_colors: Vec<Image> = Vec::with_capacity(outputs.len());
            for (out, target) in outputs.iter().zip(self.images.iter()) {
                if self.config.photo_weight > 0.0 {
                    let (loss, view_l1, view_ssim, mut grad) = losses::photometric_loss_with_grad(
                        &out.color,
                        target,
                        self.config.weights.lambda,
                        true,
                    )?;
                    photo_raw += loss / n_views;
                    l1 += view_l1 / n_views;
                    ssim_term += view_ssim / n_views;
                    let scale = self.config.photo_weight / n_views;
                    for g in grad.data.iter_mut() {
                        *g *= scale;
                    }
                    d_colors.push(grad);
                } else {
                    d_colors.push(Image::new(out.color.width, out.color.height));
                }
            }
            let mut d_depths: Vec<ScalarImage> = outputs
                .iter()
                .map(|o| ScalarImage::new(o.depth.width, o.depth.height))
                .collect();
            if delta > 0.0 {
                let views: Vec<ViewGeometry> = self
                    .cameras
                    .iter()
                    .zip(outputs.iter())
                    .map(|(cam, out)| ViewGeometry {
                        view_id: cam.id,
                        depth: &out.depth,
                        alpha: &out.alpha,
                    })
                    .collect();
                let (rg_loss, rg_grads) = losses::rendering_geometry_loss(
                    &self.model,
                    &self.cameras,
                    &self.matches,
                    &views,
                );
                rg = rg_loss;
                for (dd, g) in d_depths.iter_mut().zip(rg_grads) {
                    for (a, b) in dd.data.iter_mut().zip(g.data.iter()) {
                        *a = delta * b;
                    }
                }
            }
            for ((cam, out), (dc, dd)) in self
                .cameras
                .iter()
                .zip(outputs.iter())
                .zip(d_colors.iter().zip(d_depths.iter()))
            {
                let view_buf = rasterizer::render_backward(&self.model, cam, out, dc, dd)?;
                buffer.add(&view_buf);
            }
        }

        for (slot, g) in buffer.d_z_raw.iter_mut().zip(d_z_gp.iter()) {
            *slot += beta * g;
        }

        let photo = self.config.photo_weight * photo_raw;
        let report = losses::total_loss(
            iter,
            self.config.cache_window,
            &self.config.weights,
            photo,
            l1,
            ssim_term,
            gp,
            per_pair_gp,
            rg,
        );
        if !report.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iter,
                photo,
                gp,
                rg,
            });
        }

        // Densification statistics accumulate across steps between events.
        for i in 0..self.model.len() {
            self.grad_acc[i] += buffer.view_grad_norm[i];
            self.hit_acc[i] += buffer.hits[i];
        }

        self.apply_adam(iter, &buffer);
        debug_assert!(self.check_ray_collinearity());

        let densify = &self.config.densify;
        if densify.interval > 0
            && iter > densify.start_iter
            && iter.is_multiple_of(densify.interval)
            && iter + 1 < self.config.iterations
        {
            self.densify_and_prune();
        }

        Ok(report)
    }

    fn update_cache(&mut self, total_gp: f64, per_pair: &[f64]) {
        if self.config.cache_snapshot {
            if total_gp < self.cache.best_total {
                self.cache.best_total = total_gp;
                for (i, prim) in self.model.primitives.iter().enumerate() {
                    if let PrimitiveKind::RayBound { z_raw, .. } = prim.kind {
                        self.cache.snapshot_z[i] = z_raw;
                        self.cache.best_loss[i] = total_gp;
                    }
                }
            }
            return;
        }
        for (k, entry) in self.model.pair_table.iter().enumerate() {
            if !self.model.active[entry.prim_i] || !self.model.active[entry.prim_j] {
                continue;
            }
            let loss = per_pair[k];
            for idx in [entry.prim_i, entry.prim_j] {
                if loss < self.cache.best_loss[idx] {
                    self.cache.best_loss[idx] = loss;
                    if let PrimitiveKind::RayBound { z_raw, .. } = self.model.primitives[idx].kind {
                        self.cache.best_z_raw[idx] = z_raw;
                    }
                }
            }
        }
    }

    fn restore_cached_z(&mut self) {
        let snapshot = self.config.cache_snapshot;
        for (i, prim) in self.model.primitives.iter_mut().enumerate() {
            if let PrimitiveKind::RayBound { z_raw, .. } = &mut prim.kind {
                if snapshot {
                    if self.cache.best_total.is_finite() {
                        *z_raw = self.cache.snapshot_z[i];
                    }
                } else if self.cache.best_loss[i].is_finite() {
                    *z_raw = self.cache.best_z_raw[i];
                }
            }
        }
    }

    fn apply_adam(&mut self, iter: usize, buffer: &GradientBuffer) {
        self.adam.begin_step();
        let lr = self.config.lr;
        let z_lr = self.z_lr_at(iter);
        let pos_lr = self.position_lr_at(iter);
        let sh_rest_lr = lr.sh_dc / lr.sh_rest_div;
        for i in 0..self.model.len() {
            if !self.model.active[i] {
                continue;
            }
            let prim = &mut self.model.primitives[i];
            let mom = &mut self.moments[i];
            match &mut prim.kind {
                PrimitiveKind::Free { position } => {
                    for k in 0..3 {
                        self.adam
                            .update(pos_lr, &mut position[k], buffer.d_position[i][k], &mut mom.position[k]);
                    }
                }
                PrimitiveKind::RayBound { z_raw, .. } => {
                    self.adam.update(z_lr, z_raw, buffer.d_z_raw[i], &mut mom.z);
                }
            }
            for k in 0..3 {
                self.adam.update(
                    lr.log_scale,
                    &mut prim.log_scale[k],
                    buffer.d_log_scale[i][k],
                    &mut mom.log_scale[k],
                );
            }
            for k in 0..4 {
                self.adam.update(
                    lr.rotation,
                    &mut prim.rotation[k],
                    buffer.d_rotation[i][k],
                    &mut mom.rotation[k],
                );
            }
            self.adam.update(
                lr.opacity,
                &mut prim.opacity_logit,
                buffer.d_opacity_logit[i],
                &mut mom.opacity,
            );
            for (k, c) in prim.sh.iter_mut().enumerate() {
                let rate = if k == 0 { lr.sh_dc } else { sh_rest_lr };
                for ch in 0..3 {
                    self.adam
                        .update(rate, &mut c[ch], buffer.d_sh[i][k][ch], &mut mom.sh[k][ch]);
                }
            }
        }
    }

    /// Every ray-bound primitive must sit exactly on its ray; the position
    /// parameterization guarantees it, asserted after each step.
    fn check_ray_collinearity(&self) -> bool {
        for (i, prim) in self.model.primitives.iter().enumerate() {
            if let PrimitiveKind::RayBound { ray_index, .. } = prim.kind {
                let ray = &self.model.rays[ray_index];
                let v = self.model.position_of(i) - ray.origin;
                if v.cross(&ray.direction).norm() >= 1e-9 * v.norm().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    /// Clone or split high-gradient primitives and prune transparent free
    /// ones. Ray-bound primitives are never pruned or split; when
    /// over-reconstructed they spawn a free clone at their current position.
    #[allow(clippy::needless_range_loop)]
    pub fn densify_and_prune(&mut self) {
        let cfg = self.config.densify;
        let split_threshold = cfg.split_extent_fraction * self.scene_extent;
        let n = self.model.len();
        let coeffs = model::sh_coeff_count(self.model.sh_degree);

        let mut keep = vec![true; n];
        // (source index, new primitive) additions.
        let mut additions: Vec<GaussianPrimitive> = Vec::new();
        let mut budget = cfg.max_primitives.saturating_sub(n);
        for i in 0..n {
            let prim = &self.model.primitives[i];
            let mean_grad = self.grad_acc[i] / (self.hit_acc[i].max(1) as f64);
            let is_free = !prim.is_ray_bound();
            if is_free && prim.opacity() < cfg.prune_opacity {
                keep[i] = false;
                continue;
            }
            if !self.model.active[i] || mean_grad <= cfg.grad_threshold || budget == 0 {
                continue;
            }
            if !is_free {
                // Over-reconstructed ray-bound primitive: leave it on its
                // ray and add a free copy that can move anywhere.
                let mut clone = prim.clone();
                clone.kind = PrimitiveKind::Free {
                    position: self.model.position_of(i),
                };
                additions.push(clone);
                budget -= 1;
                continue;
            }
            let scale = prim.scale();
            if scale.max() > split_threshold {
                // Split: two samples from the parent's own distribution,
                // scales shrunk; the parent goes away.
                let position = self.model.position_of(i);
                let rot = model::quat_to_rotation(&prim.rotation).unwrap();
                let lns = cfg.split_scale_div.ln();
                let take = budget.min(2);
                for _ in 0..take {
                    let xi = Vector3::new(
                        StandardNormal.sample(&mut self.rng),
                        StandardNormal.sample(&mut self.rng),
                        StandardNormal.sample(&mut self.rng),
                    );
                    let mut child = prim.clone();
                    child.kind = PrimitiveKind::Free {
                        position: position + rot * scale.component_mul(&xi),
                    };
                    child.log_scale -= Vector3::new(lns, lns, lns);
                    additions.push(child);
                }
                budget -= take;
                if take == 2 {
                    keep[i] = false;
                }
            } else {
                // Clone in place; the optimizer will pull the copies apart.
                additions.push(prim.clone());
                budget -= 1;
            }
        }

        // Rebuild the primitive array and every per-primitive side table.
        let mut remap = vec![usize::MAX; n];
        let mut primitives = Vec::with_capacity(n + additions.len());
        let mut active = Vec::with_capacity(n + additions.len());
        let mut moments = Vec::with_capacity(n + additions.len());
        let mut best_z = Vec::with_capacity(n + additions.len());
        let mut best_loss = Vec::with_capacity(n + additions.len());
        let mut snapshot_z = Vec::with_capacity(n + additions.len());
        for i in 0..n {
            if !keep[i] {
                continue;
            }
            remap[i] = primitives.len();
            primitives.push(self.model.primitives[i].clone());
            active.push(self.model.active[i]);
            moments.push(std::mem::take(&mut self.moments[i]));
            best_z.push(self.cache.best_z_raw[i]);
            best_loss.push(self.cache.best_loss[i]);
            snapshot_z.push(self.cache.snapshot_z[i]);
        }
        for prim in additions {
            primitives.push(prim);
            active.push(true);
            moments.push(PrimMoments::new(coeffs));
            best_z.push(0.0);
            best_loss.push(f64::INFINITY);
            snapshot_z.push(0.0);
        }
        for entry in &mut self.model.pair_table {
            // Ray-bound primitives are never dropped, so these stay valid.
            entry.prim_i = remap[entry.prim_i];
            entry.prim_j = remap[entry.prim_j];
            debug_assert!(entry.prim_i != usize::MAX && entry.prim_j != usize::MAX);
        }
        self.model.primitives = primitives;
        self.model.active = active;
        self.moments = moments;
        self.cache.best_z_raw = best_z;
        self.cache.best_loss = best_loss;
        self.cache.snapshot_z = snapshot_z;
        let m = self.model.len();
        self.grad_acc = vec![0.0; m];
        self.hit_acc = vec![0; m];
    }

    /// Run the full schedule, reporting each iteration to `log`.
    pub fn run(&mut self, mut log: impl FnMut(usize, &LossReport)) -> Result<(), TrainError> {
        for iter in 0..self.config.iterations {
            let report = self.step(iter)?;
            log(iter, &report);
        }
        Ok(())
    }

    pub fn active_pair_count(&self) -> usize {
        self.model.active_pairs().count()
    }
}

fn interp_lr(start: f64, end: f64, iter: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return start;
    }
    let t = (iter as f64 / (iterations - 1) as f64).clamp(0.0, 1.0);
    start * (end / start).powf(t)
}

/// Train end-to-end over a scene directory's worth of inputs, writing the
/// CSV loss log and periodic checkpoints when an output directory is given.
pub fn train(
    cameras: Vec<Camera>,
    images: Vec<Image>,
    matches: MatchSet,
    config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(cameras, images, matches, config)?;
    let mut csv: Option<std::io::BufWriter<std::fs::File>> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(
                dir.join("train_config.json"),
                serde_json::to_string_pretty(&trainer.config).expect("serializable config"),
            )?;
            let file = std::fs::File::create(dir.join("losses.csv"))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "iter,total,photo,gp,rg,active_pairs,beta,delta,z_lr,ray_bound")?;
            Some(w)
        }
        None => None,
    };
    let checkpoint_interval = 1000;
    for iter in 0..trainer.config.iterations {
        let report = trainer.step(iter)?;
        if let Some(w) = csv.as_mut() {
            writeln!(
                w,
                "{iter},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{:.6e},{}",
                report.total,
                report.photo,
                report.gp,
                report.rg,
                trainer.active_pair_count(),
                report.beta,
                report.delta,
                trainer.z_lr_at(iter),
                trainer.model.ray_bound_count()
            )?;
        }
        if let Some(dir) = out_dir {
            if (iter + 1) % checkpoint_interval == 0 && iter + 1 < trainer.config.iterations {
                model::checkpoint::save(
                    &dir.join(format!("checkpoint_{:05}.ckpt", iter + 1)),
                    &trainer.model,
                )?;
            }
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        model::checkpoint::save(&dir.join("checkpoint_final.ckpt"), &trainer.model)?;
    }
    Ok(trainer)
}
