//! Forward pass: project every active primitive, sort front-to-back, bin
//! into tiles and composite per pixel.

use super::{Contribution, PreparedSplat, RenderOptions, RenderOutput, RowContribs};
use crate::geometry::{Camera, EPS_DEPTH};
use crate::img::{Image, ScalarImage};
use crate::model::{covariance_3d, eval_sh_raw, sigmoid, HybridModel};
use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

const TILE: usize = 16;

/// Project one primitive; `None` when it is behind the camera, degenerate or
/// (with culling) covers no pixel center.
fn prepare_splat(
    model: &HybridModel,
    camera: &Camera,
    opts: &RenderOptions,
    prim_idx: usize,
) -> Option<PreparedSplat> {
    let prim = &model.primitives[prim_idx];
    let pos = model.position_of(prim_idx);
    let p_cam = camera.world_to_cam(&pos);
    if p_cam.z <= EPS_DEPTH {
        return None;
    }
    let (fx, fy) = (camera.fx(), camera.fy());
    let mu2d = Vector2::new(
        fx * p_cam.x / p_cam.z + camera.cx(),
        fy * p_cam.y / p_cam.z + camera.cy(),
    );
    let sigma3d = covariance_3d(&prim.scale(), &prim.rotation).ok()?;
    let j = crate::model::pinhole_jacobian(fx, fy, &p_cam);
    let m = j * camera.world_to_cam_rotation();
    let mut cov = m * sigma3d * m.transpose();
    cov[(0, 0)] += opts.low_pass;
    cov[(1, 1)] += opts.low_pass;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if det <= 1e-14 {
        return None;
    }
    let inv_cov = Matrix2::new(
        cov[(1, 1)] / det,
        -cov[(0, 1)] / det,
        -cov[(1, 0)] / det,
        cov[(0, 0)] / det,
    );
    let alpha = match opts.opacity_override {
        Some(a) => a,
        None => sigmoid(prim.opacity_logit),
    };
    // Beyond q_cut the contribution is below the floor and gets skipped, so
    // the culling radius never needs to exceed sqrt(q_cut) deviations.
    let q_cut = if opts.contribution_floor > 0.0 {
        if alpha < opts.contribution_floor {
            return None;
        }
        2.0 * (alpha / opts.contribution_floor).ln()
    } else {
        f64::INFINITY
    };
    let bounds = match opts.cull_sigma {
        None => None,
        Some(ns) => {
            let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = ns.min(q_cut.sqrt()) * lambda_max.sqrt();
            let x0 = (mu2d.x - radius).ceil().max(0.0);
            let x1 = (mu2d.x + radius).floor().min((camera.width - 1) as f64);
            let y0 = (mu2d.y - radius).ceil().max(0.0);
            let y1 = (mu2d.y + radius).floor().min((camera.height - 1) as f64);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
        }
    };
    let dir = (pos - camera.center()).normalize();
    let color_raw = eval_sh_raw(&prim.sh, opts.sh_degree.min(model.sh_degree), &dir);
    Some(PreparedSplat {
        prim: prim_idx,
        mu2d,
        p_cam,
        inv_cov,
        alpha,
        color: color_raw.map(|v| v.max(0.0)),
        color_raw,
        q_cut,
        bounds,
    })
}

/// Tile bins over prepared splats (already sorted front-to-back); each bin
/// keeps that order.
fn bin_tiles(
    prepared: &[PreparedSplat],
    width: usize,
    height: usize,
) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, splat) in prepared.iter().enumerate() {
        let (x0, y0, x1, y1) = splat
            .bounds
            .expect("tile binning requires culling bounds");
        for ty in (y0 / TILE)..=(y1 / TILE) {
            for tx in (x0 / TILE)..=(x1 / TILE) {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles_y, bins)
}

type RowOutput = (Vec<Vector3<f64>>, Vec<f64>, Vec<f64>, Option<RowContribs>);

struct PixelOut {
    color: Vector3<f64>,
    depth: f64,
    alpha: f64,
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn composite_pixel(
    px: f64,
    py: f64,
    candidates: impl Iterator<Item = u32>,
    prepared: &[PreparedSplat],
    opts: &RenderOptions,
    check_bounds: bool,
    x: usize,
    y: usize,
    contribs: Option<&mut Vec<Contribution>>,
) -> PixelOut {
    let p = Vector2::new(px, py);
    let mut t = 1.0f64;
    let mut color = Vector3::zeros();
    let mut depth = 0.0f64;
    let mut alpha = 0.0f64;
    let mut sink = Vec::new();
    let record = contribs.is_some();
    let out = match contribs {
        Some(c) => c,
        None => &mut sink,
    };
    for k in candidates {
        let splat = &prepared[k as usize];
        if check_bounds {
            let (x0, y0, x1, y1) = splat.bounds.unwrap();
            if x < x0 || x > x1 || y < y0 || y > y1 {
                continue;
            }
        }
        let d = p - splat.mu2d;
        let q = splat.inv_cov[(0, 0)] * d.x * d.x
            + (splat.inv_cov[(0, 1)] + splat.inv_cov[(1, 0)]) * d.x * d.y
            + splat.inv_cov[(1, 1)] * d.y * d.y;
        if q > splat.q_cut {
            continue;
        }
        let weight = (-0.5 * q).exp();
        let mut a = splat.alpha * weight;
        if let Some(clamp) = opts.alpha_clamp {
            a = a.min(clamp);
        }
        if a < opts.contribution_floor {
            continue;
        }
        let w = t * a;
        color += splat.color * w;
        depth += splat.p_cam.z * w;
        alpha += w;
        if record {
            out.push(Contribution {
                splat: k,
                alpha: a,
                transmittance: t,
            });
        }
        t *= 1.0 - a;
        if t < opts.termination_threshold {
            break;
        }
    }
    color += opts.background * t;
    PixelOut {
        color,
        depth,
        alpha,
    }
}

/// Render the model from a camera. Primitives with positive camera depth are
/// globally sorted front-to-back (ties broken by index); inactive primitives
/// are skipped entirely.
pub fn render(model: &HybridModel, camera: &Camera, opts: &RenderOptions) -> RenderOutput {
    let mut prepared: Vec<PreparedSplat> = (0..model.len())
        .filter(|&i| model.active[i])
        .filter_map(|i| prepare_splat(model, camera, opts, i))
        .collect();
    prepared.sort_by(|a, b| {
        a.p_cam
            .z
            .partial_cmp(&b.p_cam.z)
            .unwrap()
            .then(a.prim.cmp(&b.prim))
    });

    let (w, h) = (camera.width, camera.height);
    let culling = opts.cull_sigma.is_some();
    let tiles = if culling {
        Some(bin_tiles(&prepared, w, h))
    } else {
        None
    };

    let mut color = Image::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha = ScalarImage::new(w, h);
    let mut rows: Vec<RowContribs> = Vec::new();

    // Rows render independently; chunk boundaries are fixed so output does
    // not depend on the worker count.
    let row_results: Vec<RowOutput> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_color = vec![Vector3::zeros(); w];
            let mut row_depth = vec![0.0; w];
            let mut row_alpha = vec![0.0; w];
            let mut row_contribs = if opts.retain_for_backward {
                Some(RowContribs {
                    offsets: Vec::with_capacity(w + 1),
                    items: Vec::new(),
                })
            } else {
                None
            };
            for x in 0..w {
                if let Some(rc) = row_contribs.as_mut() {
                    rc.offsets.push(rc.items.len() as u32);
                }
                let out = match &tiles {
                    Some((tiles_x, _, bins)) => {
                        let bin = &bins[(y / TILE) * tiles_x + x / TILE];
                        composite_pixel(
                            x as f64,
                            y as f64,
                            bin.iter().copied(),
                            &prepared,
                            opts,
                            true,
                            x,
                            y,
                            row_contribs.as_mut().map(|rc| &mut rc.items),
                        )
                    }
                    None => composite_pixel(
                        x as f64,
                        y as f64,
                        0..prepared.len() as u32,
                        &prepared,
                        opts,
                        false,
                        x,
                        y,
                        row_contribs.as_mut().map(|rc| &mut rc.items),
                    ),
                };
                row_color[x] = out.color;
                row_depth[x] = out.depth;
                row_alpha[x] = out.alpha;
            }
            if let Some(rc) = row_contribs.as_mut() {
                rc.offsets.push(rc.items.len() as u32);
            }
            (row_color, row_depth, row_alpha, row_contribs)
        })
        .collect();

    for (y, (rc, rd, ra, contribs)) in row_results.into_iter().enumerate() {
        color.data[y * w..(y + 1) * w].copy_from_slice(&rc);
        depth.data[y * w..(y + 1) * w].copy_from_slice(&rd);
        alpha.data[y * w..(y + 1) * w].copy_from_slice(&ra);
        if let Some(c) = contribs {
            rows.push(c);
        }
    }

    let mut depth_raw = None;
    if opts.normalize_depth {
        let raw = depth.clone();
        for (d, a) in depth.data.iter_mut().zip(alpha.data.iter()) {
            *d /= a.max(1e-12);
        }
        depth_raw = Some(raw);
    }

    RenderOutput {
        color,
        depth,
        alpha,
        depth_raw,
        contributors: opts.retain_for_backward.then_some(rows),
        prepared: opts.retain_for_backward.then_some(prepared),
        options: opts.clone(),
    }
}
