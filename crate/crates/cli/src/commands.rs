//! Subcommand implementations. Every run writes a `config.json` snapshot of
//! the resolved options (plus seed and version) into its output directory so
//! runs can be reproduced bit-for-bit.

use crate::{AppError, EvalArgs, RenderArgs, SynthArgs, TrainArgs, VizDepthArgs};
use anyhow::{anyhow, Context};
use scgs::geometry::camera_by_id;
use scgs::matching::{self, MatchSet, SynthParams};
use scgs::metrics;
use scgs::model::checkpoint;
use scgs::scene::{self, BoxSpec, LoadedScene, PlaneSceneParams};
use scgs::trainer::{self, TrainConfig, ZInit};
use scgs::{img, rasterizer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

type Result<T> = std::result::Result<T, AppError>;

fn data<T>(r: anyhow::Result<T>) -> Result<T> {
    r.map_err(AppError::Data)
}

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    #[serde(flatten)]
    payload: T,
}

fn write_snapshot<T: Serialize>(dir: &Path, command: &str, payload: T) -> Result<()> {
    let snap = Snapshot {
        command,
        version: VERSION,
        payload,
    };
    data(
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&snap).expect("serializable snapshot"),
        )
        .with_context(|| format!("writing config snapshot in {}", dir.display())),
    )
}

fn load_scene_dir(path: &Path) -> Result<LoadedScene> {
    data(
        scene::load_scene(path)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("loading scene directory {}", path.display())),
    )
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SynthSnapshot {
    scene: PlaneSceneParams,
    pairs_per_view_pair: usize,
    noise_px: f64,
    outlier_rate: f64,
    seed: u64,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut params = PlaneSceneParams {
        width: args.size,
        height: args.size,
        focal_px: args.size as f64,
        n_train_views: args.views,
        n_test_views: args.test_views,
        seed: args.seed,
        ..Default::default()
    };
    if args.with_box {
        params.boxes.push(BoxSpec {
            center: [-0.35, -0.1, 1.55],
            half_extents: [0.25, 0.25, 0.2],
            checker_freq: 5.0,
            color_a: [0.9, 0.8, 0.2],
            color_b: [0.25, 0.2, 0.6],
        });
    }
    let scene = data(
        scene::make_plane_scene(&params)
            .map_err(anyhow::Error::from)
            .context("generating scene"),
    )?;
    data(
        std::fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display())),
    )?;
    data(
        scene::export_scene(&args.out, &scene)
            .map_err(anyhow::Error::from)
            .context("exporting scene"),
    )?;

    // Matches over all unordered training view pairs.
    let mut all = MatchSet::default();
    let train = &scene.train_ids;
    for (a_pos, &a) in train.iter().enumerate() {
        for &b in train.iter().skip(a_pos + 1) {
            let set = matching::synth_matches(
                scene.depth(a),
                scene.camera(a),
                scene.depth(b),
                scene.camera(b),
                &SynthParams {
                    count: args.pairs,
                    noise_px: args.noise_px,
                    outlier_rate: args.outliers,
                    seed: args
                        .seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add((a as u64) << 32 | b as u64),
                    ..Default::default()
                },
            );
            all.extend(set);
        }
    }
    data(
        matching::save_matches(&args.out.join("matches.jsonl"), &all)
            .map_err(anyhow::Error::from)
            .context("writing matches"),
    )?;
    write_snapshot(
        &args.out,
        "synth",
        SynthSnapshot {
            scene: params,
            pairs_per_view_pair: args.pairs,
            noise_px: args.noise_px,
            outlier_rate: args.outliers,
            seed: args.seed,
        },
    )?;
    println!(
        "scene written to {} ({} train views, {} test views, {} matches)",
        args.out.display(),
        scene.train_ids.len(),
        scene.test_ids.len(),
        all.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrainSnapshot {
    scene: PathBuf,
    config: TrainConfig,
}

fn parse_z_lr(text: &str) -> anyhow::Result<(f64, f64)> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| anyhow!("--z-lr wants start:end, got {text:?}"))?;
    Ok((a.parse()?, b.parse()?))
}

fn resolve_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            // Accept either a train snapshot or a bare TrainConfig document.
            match serde_json::from_str::<TrainSnapshot>(&text) {
                Ok(snap) => snap.config,
                Err(_) => serde_json::from_str::<TrainConfig>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?,
            }
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.iters {
        config.iterations = v;
    }
    if let Some(v) = args.beta {
        config.weights.beta = v;
    }
    if let Some(v) = args.delta {
        config.weights.delta = v;
    }
    if let Some(v) = args.lambda {
        config.weights.lambda = v;
    }
    if let Some(v) = args.eta {
        config.weights.eta = v;
    }
    if let Some(v) = args.cache_window {
        config.cache_window = v;
    }
    if let Some(text) = &args.z_lr {
        let (start, end) = parse_z_lr(text)?;
        config.lr.z_start = start;
        config.lr.z_end = end;
    }
    if let Some(v) = args.photo_weight {
        config.photo_weight = v;
    }
    if let Some(v) = args.sh_degree {
        config.sh_degree = v;
    }
    if let Some(v) = args.densify_interval {
        config.densify.interval = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(text) = &args.z_init {
        config.z_init = match text.as_str() {
            "loguniform" => ZInit::LogUniform,
            "triangulated" => ZInit::Triangulated,
            other => return Err(anyhow!("--z-init wants loguniform|triangulated, got {other:?}")),
        };
    }
    if args.snapshot_cache {
        config.cache_snapshot = true;
    }
    if args.normalize_depth_rg {
        config.normalize_depth_for_rg = true;
    }
    Ok(config)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = data(resolve_train_config(&args))?;
    let matches_path = args.scene.join("matches.jsonl");
    if !matches_path.exists() {
        return Err(AppError::Data(anyhow!(
            "matches file not found: expected {}",
            matches_path.display()
        )));
    }
    let scene = load_scene_dir(&args.scene)?;
    let loaded = data(
        matching::load_matches(&matches_path, &scene.cameras)
            .map_err(anyhow::Error::from)
            .context("loading matches"),
    )?;
    if loaded.dropped_out_of_bounds > 0 {
        eprintln!(
            "note: dropped {} out-of-bounds match records",
            loaded.dropped_out_of_bounds
        );
    }
    // Train on the scene's training views only.
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    for &id in &scene.train_ids {
        let cam = camera_by_id(&scene.cameras, id)
            .ok_or_else(|| AppError::Data(anyhow!("train view {id} missing from cameras.json")))?;
        let idx = scene.cameras.iter().position(|c| c.id == id).unwrap();
        cameras.push(cam.clone());
        images.push(scene.images[idx].clone());
    }
    data(
        std::fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display())),
    )?;
    write_snapshot(
        &args.out,
        "train",
        TrainSnapshot {
            scene: args.scene.clone(),
            config: config.clone(),
        },
    )?;
    let result = trainer::train(cameras, images, loaded.set, config, Some(&args.out));
    let trainer = match result {
        Ok(t) => t,
        Err(e @ trainer::TrainError::NonFiniteLoss { .. }) => {
            return Err(AppError::Numerical(anyhow::Error::from(e)))
        }
        Err(e) => return Err(AppError::Data(anyhow::Error::from(e))),
    };
    println!(
        "trained {} primitives ({} ray-bound, {} active pairs); outputs in {}",
        trainer.model.len(),
        trainer.model.ray_bound_count(),
        trainer.active_pair_count(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// render / eval / viz-depth
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RenderSnapshot {
    checkpoint: PathBuf,
    scene: PathBuf,
    views: Vec<u32>,
}

fn load_checkpoint(path: &Path) -> Result<scgs::HybridModel> {
    data(
        checkpoint::load(path)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("loading checkpoint {}", path.display())),
    )
}

fn pick_views(requested: &[u32], fallback: Vec<u32>, scene: &LoadedScene) -> Result<Vec<u32>> {
    let views = if requested.is_empty() {
        fallback
    } else {
        requested.to_vec()
    };
    for &id in &views {
        if scene.camera(id).is_none() {
            return Err(AppError::Data(anyhow!(
                "view {id} not present in the scene's cameras.json"
            )));
        }
    }
    Ok(views)
}

pub fn render(args: RenderArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene_dir(&args.scene)?;
    let all: Vec<u32> = scene.cameras.iter().map(|c| c.id).collect();
    let views = pick_views(&args.views, all, &scene)?;
    data(std::fs::create_dir_all(&args.out).context("creating output directory"))?;
    let opts = rasterizer::RenderOptions {
        sh_degree: model.sh_degree,
        ..Default::default()
    };
    for &id in &views {
        let cam = scene.camera(id).unwrap();
        let out = rasterizer::render(&model, cam, &opts);
        data(
            img::write_image(&args.out.join(format!("color_{id:03}.png")), &out.color)
                .map_err(anyhow::Error::from),
        )?;
        data(
            img::write_image(
                &args.out.join(format!("depth_{id:03}.png")),
                &img::colormap_image(&out.depth),
            )
            .map_err(anyhow::Error::from),
        )?;
    }
    write_snapshot(
        &args.out,
        "render",
        RenderSnapshot {
            checkpoint: args.checkpoint.clone(),
            scene: args.scene.clone(),
            views,
        },
    )?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene_dir(&args.scene)?;
    let fallback = if scene.test_ids.is_empty() {
        scene.cameras.iter().map(|c| c.id).collect()
    } else {
        scene.test_ids.clone()
    };
    let views = pick_views(&args.views, fallback, &scene)?;
    // Optional LPIPS sidecar: {"<view id>": value}.
    let lpips: BTreeMap<u32, f64> = match std::fs::read_to_string(args.scene.join("lpips.json")) {
        Ok(text) => data(serde_json::from_str(&text).context("parsing lpips.json"))?,
        Err(_) => BTreeMap::new(),
    };
    data(std::fs::create_dir_all(&args.out).context("creating output directory"))?;
    let opts = rasterizer::RenderOptions {
        sh_degree: model.sh_degree,
        ..Default::default()
    };
    let mut table = String::from("view,psnr,ssim,avg,avg_partial\n");
    let mut sums = (0.0, 0.0, 0.0);
    let mut any_partial = false;
    for &id in &views {
        let cam = scene.camera(id).unwrap();
        let idx = scene.cameras.iter().position(|c| c.id == id).unwrap();
        let out = rasterizer::render(&model, cam, &opts);
        let target = &scene.images[idx];
        let psnr = data(metrics::psnr(&out.color, target).map_err(anyhow::Error::from))?;
        let ssim = data(metrics::ssim(&out.color, target).map_err(anyhow::Error::from))?;
        let avg = metrics::avg_metric(psnr, ssim, lpips.get(&id).copied());
        any_partial |= avg.partial;
        table.push_str(&format!(
            "{id},{psnr:.4},{ssim:.6},{:.6},{}\n",
            avg.value, avg.partial
        ));
        sums.0 += psnr;
        sums.1 += ssim;
        sums.2 += avg.value;
        println!(
            "view {id}: PSNR {psnr:.2} dB  SSIM {ssim:.4}  AVG{} {:.4}",
            if avg.partial { "(partial)" } else { "" },
            avg.value
        );
    }
    let n = views.len().max(1) as f64;
    println!(
        "mean: PSNR {:.2} dB  SSIM {:.4}  AVG{} {:.4}",
        sums.0 / n,
        sums.1 / n,
        if any_partial { "(partial)" } else { "" },
        sums.2 / n
    );
    table.push_str(&format!(
        "mean,{:.4},{:.6},{:.6},{}\n",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        any_partial
    ));
    let mut f = data(
        std::fs::File::create(args.out.join("metrics.csv")).context("writing metrics.csv"),
    )?;
    data(f.write_all(table.as_bytes()).context("writing metrics.csv"))?;
    write_snapshot(
        &args.out,
        "eval",
        RenderSnapshot {
            checkpoint: args.checkpoint.clone(),
            scene: args.scene.clone(),
            views,
        },
    )?;
    Ok(())
}

pub fn viz_depth(args: VizDepthArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene_dir(&args.scene)?;
    let all: Vec<u32> = scene.cameras.iter().map(|c| c.id).collect();
    let views = pick_views(&args.views, all, &scene)?;
    data(std::fs::create_dir_all(&args.out).context("creating output directory"))?;
    for &id in &views {
        let cam = scene.camera(id).unwrap();
        let dist = rasterizer::render_primitive_distance(&model, cam, args.clamp);
        data(
            img::write_image(
                &args.out.join(format!("primitive_distance_{id:03}.png")),
                &img::colormap_image(&dist),
            )
            .map_err(anyhow::Error::from),
        )?;
    }
    write_snapshot(
        &args.out,
        "viz-depth",
        RenderSnapshot {
            checkpoint: args.checkpoint.clone(),
            scene: args.scene.clone(),
            views,
        },
    )?;
    Ok(())
}
