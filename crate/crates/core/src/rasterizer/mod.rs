//! Differentiable forward rendering of color, depth and accumulated alpha by
//! ordered front-to-back alpha compositing, with analytic gradients for every
//! primitive attribute including the ray distance of bound primitives.
//!
//! Per pixel, with splats sorted front-to-back by camera depth:
//!
//! ```text
//! alpha'_i = min(clamp, opacity_i * exp(-0.5 d^T Sigma'^-1 d))
//! C = sum_i c_i alpha'_i T_i + T_end * background,   T_i = prod_{j<i} (1 - alpha'_j)
//! D = sum_i z_i alpha'_i T_i
//! A = sum_i alpha'_i T_i
//! ```

mod backward;
mod forward;

pub use backward::{render_backward, BackwardError, GradientBuffer};
pub use forward::render;

use crate::img::{Image, ScalarImage};
use nalgebra::{Matrix2, Vector2, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    /// Spherical-harmonics degree to evaluate (bands above are ignored).
    pub sh_degree: u32,
    /// Keep per-pixel contributor records for a later backward pass.
    pub retain_for_backward: bool,
    /// Upper clamp on per-splat alpha; `None` disables clamping.
    pub alpha_clamp: Option<f64>,
    /// Contributions below this are skipped.
    pub contribution_floor: f64,
    /// Compositing stops once transmittance drops below this.
    pub termination_threshold: f64,
    /// Added to the diagonal of the projected covariance (pixels squared).
    pub low_pass: f64,
    /// Screen-space culling radius in standard deviations; `None` disables
    /// culling so every splat is evaluated at every pixel.
    pub cull_sigma: Option<f64>,
    /// Divide the depth composite by accumulated alpha.
    pub normalize_depth: bool,
    /// Force every activated opacity to this value (primitive-distance
    /// rendering); gradients are unsupported while set.
    pub opacity_override: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: Vector3::zeros(),
            sh_degree: 3,
            retain_for_backward: false,
            alpha_clamp: Some(0.99),
            contribution_floor: 1.0 / 255.0,
            termination_threshold: 1e-4,
            low_pass: 0.3,
            cull_sigma: Some(3.0),
            normalize_depth: false,
            opacity_override: None,
        }
    }
}

impl RenderOptions {
    /// Exact-evaluation options: no clamping, no floor, no early termination
    /// and no culling. Used by oracle-equivalence and gradient checks.
    pub fn exact() -> Self {
        Self {
            alpha_clamp: None,
            contribution_floor: 0.0,
            termination_threshold: 0.0,
            cull_sigma: None,
            ..Self::default()
        }
    }
}

/// One splat's contribution to one pixel, retained for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the prepared-splat array (not the primitive array).
    pub splat: u32,
    /// The composited alpha `alpha'_i`.
    pub alpha: f64,
    /// Transmittance before this splat.
    pub transmittance: f64,
}

/// Contributor lists for one image row, in compressed form: pixel `x` owns
/// `items[offsets[x]..offsets[x + 1]]`.
#[derive(Debug, Clone, Default)]
pub struct RowContribs {
    pub offsets: Vec<u32>,
    pub items: Vec<Contribution>,
}

/// A primitive after projection, ready for per-pixel evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSplat {
    pub prim: usize,
    pub mu2d: Vector2<f64>,
    pub p_cam: Vector3<f64>,
    pub inv_cov: Matrix2<f64>,
    pub alpha: f64,
    pub color: Vector3<f64>,
    /// Pre-clamp SH value, kept so the backward pass can mask channels.
    pub color_raw: Vector3<f64>,
    /// Mahalanobis-squared cutoff implied by the contribution floor: beyond
    /// it `alpha * weight` falls below the floor, so the exponential can be
    /// skipped without changing the composite.
    pub q_cut: f64,
    /// Inclusive pixel bounds, present when culling is enabled.
    pub bounds: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    /// Camera-space depth composite (normalized by alpha when the option is
    /// set).
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    /// Raw (unnormalized) depth composite, retained when it differs from
    /// `depth`.
    pub depth_raw: Option<ScalarImage>,
    /// Per-row contributor records, present when retained.
    pub contributors: Option<Vec<RowContribs>>,
    /// Projected splats in front-to-back order, present when retained.
    pub prepared: Option<Vec<PreparedSplat>>,
    /// The options the image was rendered with.
    pub options: RenderOptions,
}

impl RenderOutput {
    pub fn raw_depth(&self) -> &ScalarImage {
        self.depth_raw.as_ref().unwrap_or(&self.depth)
    }
}

/// Depth map of the nearest contributing primitives: every opacity is forced
/// to 1.0 so the front splat saturates transmittance. With `clamp` the
/// per-splat alpha is still clamped at 0.99, matching the ordinary renderer;
/// without it the composite degenerates to the nearest splat's depth exactly.
pub fn render_primitive_distance(
    model: &crate::model::HybridModel,
    camera: &crate::geometry::Camera,
    clamp: bool,
) -> ScalarImage {
    let opts = RenderOptions {
        opacity_override: Some(1.0),
        alpha_clamp: if clamp { Some(0.99) } else { None },
        sh_degree: 0,
        ..RenderOptions::default()
    };
    render(model, camera, &opts).depth
}
