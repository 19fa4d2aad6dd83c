//! Pixel correspondences: ingestion of precomputed match files, synthetic
//! ground-truth match generation for testing, and the sticky outlier filter
//! over ray-bound primitive pairs.
//!
//! Match files are JSON-lines, one record per pair:
//!
//! ```text
//! {"vi": 0, "vj": 1, "pi": [31.0, 12.5], "pj": [28.4, 13.1], "conf": 0.97}
//! ```
//!
//! with pixel centers at integer coordinates (view ids refer to the camera
//! file). To export matches from an external matcher, dump one such line per
//! correspondence; for dense matchers (DKM-style warp fields) sample the
//! warp at keypoints and write `conf` from the matcher's certainty map, and
//! for sparse matchers (SuperGlue/LoFTR-style) write the matched keypoint
//! pairs directly.

use crate::geometry::{self, Camera};
use crate::img::ScalarImage;
use crate::model::HybridModel;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MatchError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error on line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("record on line {line} references unknown view id {id}")]
    UnknownViewId { line: usize, id: u32 },
    #[error("record on line {line} matches view {id} with itself")]
    SelfMatch { line: usize, id: u32 },
}

/// One correspondence between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub view_i: u32,
    pub view_j: u32,
    pub p_i: Vector2<f64>,
    pub p_j: Vector2<f64>,
    pub confidence: f64,
}

/// A validated set of pairs with a per-view-pair index.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    index: BTreeMap<(u32, u32), Vec<usize>>,
}

impl MatchSet {
    pub fn from_pairs(pairs: Vec<MatchPair>) -> Self {
        let mut set = Self {
            pairs,
            index: BTreeMap::new(),
        };
        set.rebuild_index();
        set
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        for (k, pair) in self.pairs.iter().enumerate() {
            self.index
                .entry((pair.view_i, pair.view_j))
                .or_default()
                .push(k);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices of pairs between an (ordered) view pair.
    pub fn between(&self, view_i: u32, view_j: u32) -> &[usize] {
        self.index
            .get(&(view_i, view_j))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Merge another set into this one.
    pub fn extend(&mut self, other: MatchSet) {
        self.pairs.extend(other.pairs);
        self.rebuild_index();
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatchRecord {
    vi: u32,
    vj: u32,
    pi: [f64; 2],
    pj: [f64; 2],
    #[serde(default = "default_conf")]
    conf: f64,
}

fn default_conf() -> f64 {
    1.0
}

/// Result of loading a match file: the validated set plus how many records
/// were dropped for out-of-bounds pixels or duplicate keys.
#[derive(Debug)]
pub struct LoadedMatches {
    pub set: MatchSet,
    pub dropped_out_of_bounds: usize,
    pub dropped_duplicates: usize,
}

/// Load a JSON-lines match file, validating view ids and pixel bounds
/// against the cameras. Out-of-bounds pairs are dropped (counted, not
/// fatal); duplicate `(vi, vj, pi)` keys keep their first occurrence.
pub fn load_matches(path: &Path, cameras: &[Camera]) -> Result<LoadedMatches, MatchError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    let mut dropped_oob = 0usize;
    let mut dropped_dup = 0usize;
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let rec: MatchRecord =
            serde_json::from_str(trimmed).map_err(|e| MatchError::ParseError {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if rec.vi == rec.vj {
            return Err(MatchError::SelfMatch {
                line: lineno + 1,
                id: rec.vi,
            });
        }
        let cam_i = geometry::camera_by_id(cameras, rec.vi).ok_or(MatchError::UnknownViewId {
            line: lineno + 1,
            id: rec.vi,
        })?;
        let cam_j = geometry::camera_by_id(cameras, rec.vj).ok_or(MatchError::UnknownViewId {
            line: lineno + 1,
            id: rec.vj,
        })?;
        let p_i = Vector2::new(rec.pi[0], rec.pi[1]);
        let p_j = Vector2::new(rec.pj[0], rec.pj[1]);
        if !cam_i.contains_pixel(&p_i) || !cam_j.contains_pixel(&p_j) {
            dropped_oob += 1;
            continue;
        }
        if !seen.insert((rec.vi, rec.vj, p_i.x.to_bits(), p_i.y.to_bits())) {
            dropped_dup += 1;
            continue;
        }
        pairs.push(MatchPair {
            view_i: rec.vi,
            view_j: rec.vj,
            p_i,
            p_j,
            confidence: rec.conf,
        });
    }
    Ok(LoadedMatches {
        set: MatchSet::from_pairs(pairs),
        dropped_out_of_bounds: dropped_oob,
        dropped_duplicates: dropped_dup,
    })
}

pub fn save_matches(path: &Path, set: &MatchSet) -> Result<(), MatchError> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for pair in &set.pairs {
        let rec = MatchRecord {
            vi: pair.view_i,
            vj: pair.view_j,
            pi: [pair.p_i.x, pair.p_i.y],
            pj: [pair.p_j.x, pair.p_j.y],
            conf: pair.confidence,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| MatchError::ParseError {
            line: 0,
            msg: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Knobs for synthetic match generation.
#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub count: usize,
    /// Gaussian pixel noise applied to both endpoints of inlier pairs.
    pub noise_px: f64,
    /// Fraction of pairs replaced by mismatches.
    pub outlier_rate: f64,
    /// Mismatches are resampled until they sit at least this far from the
    /// true correspondence and from both epipolar lines, so a reprojection
    /// filter can detect them (a mismatch lying on the epipolar line is
    /// geometrically indistinguishable from a true match at another depth).
    pub min_outlier_px: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            count: 500,
            noise_px: 0.0,
            outlier_rate: 0.0,
            min_outlier_px: 20.0,
            seed: 0,
        }
    }
}

/// Generate correspondences between two views from their ground-truth depth
/// maps: sample pixels in view i, lift by the exact depth, project into view
/// j, and keep pairs that land in bounds with consistent depth (within 1%)
/// in view j. Inliers get Gaussian pixel noise; an `outlier_rate` fraction
/// is replaced by uniform-random, epipolar-inconsistent pixels.
pub fn synth_matches(
    depth_i: &ScalarImage,
    cam_i: &Camera,
    depth_j: &ScalarImage,
    cam_j: &Camera,
    params: &SynthParams,
) -> MatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_px.max(1e-12)).unwrap();
    let mut pairs = Vec::with_capacity(params.count);
    let mut attempts = 0usize;
    let max_attempts = params.count.max(1) * 200;
    let mut seen = std::collections::HashSet::new();
    while pairs.len() < params.count && attempts < max_attempts {
        attempts += 1;
        let x = rng.random_range(0..cam_i.width);
        let y = rng.random_range(0..cam_i.height);
        let d = depth_i.get(x, y);
        if d <= 0.0 {
            continue;
        }
        let p_i_true = Vector2::new(x as f64, y as f64);
        let surface = match geometry::lift_pixel(cam_i, &p_i_true, d) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let Ok(p_j_true) = geometry::project_point(cam_j, &surface) else {
            continue;
        };
        if !cam_j.contains_pixel(&p_j_true) {
            continue;
        }
        // Occlusion check: the reprojected depth must agree with view j's
        // own ground truth.
        let z_j = cam_j.world_to_cam(&surface).z;
        let gt_j = depth_j.sample_bilinear(p_j_true.x, p_j_true.y);
        if gt_j <= 0.0 || (z_j - gt_j).abs() > 0.01 * z_j {
            continue;
        }

        let mut p_i = p_i_true;
        let mut p_j = p_j_true;
        if params.noise_px > 0.0 {
            p_i.x += noise.sample(&mut rng);
            p_i.y += noise.sample(&mut rng);
        }
        if rng.random_range(0.0..1.0) < params.outlier_rate {
            let Some(bad) = sample_outlier(cam_i, cam_j, &p_i, &p_j_true, params.min_outlier_px, &mut rng)
            else {
                continue;
            };
            p_j = bad;
        } else if params.noise_px > 0.0 {
            p_j.x += noise.sample(&mut rng);
            p_j.y += noise.sample(&mut rng);
        }
        if !cam_i.contains_pixel(&p_i) || !cam_j.contains_pixel(&p_j) {
            continue;
        }
        if !seen.insert((p_i.x.to_bits(), p_i.y.to_bits())) {
            continue;
        }
        pairs.push(MatchPair {
            view_i: cam_i.id,
            view_j: cam_j.id,
            p_i,
            p_j,
            confidence: 1.0,
        });
    }
    MatchSet::from_pairs(pairs)
}

fn sample_outlier(
    cam_i: &Camera,
    cam_j: &Camera,
    p_i: &Vector2<f64>,
    p_j_true: &Vector2<f64>,
    min_px: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vector2<f64>> {
    let line_ij = geometry::epipolar_line(cam_i, cam_j, p_i);
    for _ in 0..100 {
        let cand = Vector2::new(
            rng.random_range(0.0..(cam_j.width - 1) as f64),
            rng.random_range(0.0..(cam_j.height - 1) as f64),
        );
        if (cand - p_j_true).norm() < min_px {
            continue;
        }
        if geometry::line_point_distance(&line_ij, &cand) < min_px {
            continue;
        }
        let line_ji = geometry::epipolar_line(cam_j, cam_i, &cand);
        if geometry::line_point_distance(&line_ji, p_i) < min_px {
            continue;
        }
        return Some(cand);
    }
    None
}

/// Deactivate every pair (and both of its primitives) whose loss exceeds
/// `eta`. The mask is sticky: already-inactive pairs stay inactive. Returns
/// how many pairs were newly deactivated.
pub fn filter_pairs(model: &mut HybridModel, per_pair_loss: &[f64], eta: f64) -> usize {
    assert_eq!(per_pair_loss.len(), model.pair_table.len());
    let mut newly = 0usize;
    for (k, entry) in model.pair_table.iter().enumerate() {
        if !model.active[entry.prim_i] || !model.active[entry.prim_j] {
            continue;
        }
        if per_pair_loss[k] > eta {
            model.active[entry.prim_i] = false;
            model.active[entry.prim_j] = false;
            newly += 1;
        }
    }
    newly
}
