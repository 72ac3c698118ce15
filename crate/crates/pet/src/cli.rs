//! Command-line entry points.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::apps::{self, PartialOptions};
use crate::config::{RunConfig, SplitMode};
use crate::data::{
    self, generate, load_dataset, load_predictions, save_dataset, save_predictions,
    PredictionRecord, Scene, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::PetModel;
use crate::selftest;
use crate::trainer::{with_thread_cap, Trainer};

#[derive(Parser)]
#[command(name = "pet", version, about = "Point-query crowd counting and localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset
    Gen(GenArgs),
    /// Train a model, writing checkpoints and loss curves
    Train(TrainArgs),
    /// Run inference over a dataset, writing a predictions manifest
    Infer(InferArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Two-step partial-annotation training
    Partial(PartialArgs),
    /// Refine point annotations by feeding them back as queries
    Refine(RefineArgs),
    /// Run the gradient, matching-oracle, and invariant suites
    Selftest,
}

/// Shared config plumbing: a JSON file plus individual flag overrides
/// (flags win). Unknown file keys are rejected.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_transformer: Option<f64>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    #[arg(long)]
    dense_count_threshold: Option<f64>,
    #[arg(long, value_parser = parse_split_mode)]
    split_mode: Option<SplitMode>,
    /// Worker cap (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_split_mode(s: &str) -> std::result::Result<SplitMode, String> {
    match s {
        "learned" => Ok(SplitMode::Learned),
        "never" => Ok(SplitMode::Never),
        "always" => Ok(SplitMode::Always),
        other => Err(format!("unknown split mode {other} (learned|never|always)")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?
            }
        };
        macro_rules! override_from {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        override_from!(
            seed,
            epochs,
            batch_size,
            crop,
            lr_backbone,
            lr_transformer,
            conf_threshold,
            dense_count_threshold,
            split_mode,
            threads
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for images and manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 5)]
    count_min: usize,
    #[arg(long, default_value_t = 150)]
    count_max: usize,
    #[arg(long, default_value_t = 2.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 6.0)]
    radius_max: f64,
    /// Density gradient strength toward the top of the image
    #[arg(long, default_value_t = 4.0)]
    perspective: f64,
    #[arg(long, default_value_t = 0.25)]
    overlap_cap: f64,
    #[arg(long, default_value_t = 6)]
    clutter: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training manifest
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoints, loss.csv, config echo)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Predictions manifest to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Write split-map overlays (red = split) into this directory
    #[arg(long)]
    dump_split_maps: Option<PathBuf>,
    /// Write per-window encoder attention maps into this directory
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions manifest
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth manifest
    #[arg(long)]
    gt: PathBuf,
    /// Report JSON path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Localization thresholds in pixels (repeatable)
    #[arg(long = "sigma", default_values_t = [4.0, 8.0])]
    sigmas: Vec<f64>,
}

#[derive(Args)]
struct PartialArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Manifest whose scenes carry annotated-region rectangles
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pseudo-label band beyond the region, in pixels
    #[arg(long, default_value_t = 16.0)]
    dilation: f64,
    #[arg(long, default_value_t = 0.5)]
    accept_conf: f64,
    #[arg(long, default_value_t = 4.0)]
    dedup: f64,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the refined manifest and the displacement report
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Partial(a) => cmd_partial(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Contract(_) => 1,
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<i32> {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        count_min: a.count_min,
        count_max: a.count_max,
        head_radius_min: a.radius_min,
        head_radius_max: a.radius_max,
        perspective: a.perspective,
        overlap_cap: a.overlap_cap,
        clutter: a.clutter,
        seed: a.seed,
    };
    let scenes = generate(&cfg, a.n)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = save_dataset(&a.out, &scenes)?;
    write_json(&a.out.join("gen_config.json"), &cfg)?;
    println!("wrote {} scenes to {}", scenes.len(), manifest.display());
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let scenes = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&a.out.join("config.json"), &cfg)?;

    with_thread_cap(cfg.threads, || -> Result<i32> {
        let (model, store) = PetModel::new(&cfg)?;
        let mut trainer = Trainer::new(&model, store, cfg.clone());
        let csv_path = a.out.join("loss.csv");
        let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(csv, "epoch,pack,l_pq,l_split,l_total").map_err(|e| Error::io(&csv_path, e))?;
        for epoch in 0..cfg.epochs {
            let stats = trainer.train_epoch(&scenes, epoch)?;
            for (pack, s) in [("sparse", &stats.sparse), ("dense", &stats.dense)] {
                if s.batches > 0 {
                    let (pq, split, total) = s.mean();
                    writeln!(csv, "{epoch},{pack},{pq},{split},{total}")
                        .map_err(|e| Error::io(&csv_path, e))?;
                }
            }
            println!(
                "epoch {epoch}: total {:.5} ({} steps)",
                stats.mean_total, stats.steps
            );
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                let name = if last {
                    "final.ckpt".to_string()
                } else {
                    format!("epoch_{epoch:04}.ckpt")
                };
                crate::model::save_checkpoint(&a.out.join(name), &cfg, &trainer.store)?;
            }
        }
        Ok(0)
    })
}

fn cmd_infer(a: InferArgs) -> Result<i32> {
    let (model, store) = PetModel::from_checkpoint(&a.checkpoint)?;
    let conf = a.conf_threshold.unwrap_or(model.cfg.conf_threshold);
    let scenes = load_dataset(&a.data)?;
    with_thread_cap(a.threads, || -> Result<i32> {
        let mut records = Vec::with_capacity(scenes.len());
        for scene in &scenes {
            let r = model.infer(&store, &scene.to_tensor(), conf)?;
            records.push(PredictionRecord {
                id: scene.id.clone(),
                image: format!("images/{}.png", scene.id),
                points: r.detections.iter().map(|&(x, y, _)| [x, y]).collect(),
                confidences: r.detections.iter().map(|&(_, _, c)| c).collect(),
            });
            if let Some(dir) = &a.dump_split_maps {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                dump_split_overlay(dir, scene, &r.split_map)?;
            }
            if let Some(dir) = &a.dump_attention {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                dump_attention_maps(&model, &store, dir, scene)?;
            }
        }
        save_predictions(&a.out, &records)?;
        println!("wrote {} prediction records to {}", records.len(), a.out.display());
        Ok(0)
    })
}

/// Split map upsampled to image size as a red overlay (alpha follows the
/// split probability).
fn dump_split_overlay(dir: &Path, scene: &Scene, map: &crate::quadtree::SplitMap) -> Result<()> {
    let (w, h) = (scene.width() as u32, scene.height() as u32);
    let mut img = scene.image.clone();
    for y in 0..h {
        for x in 0..w {
            let cell_r = (y as usize * map.h / h as usize).min(map.h - 1);
            let cell_c = (x as usize * map.w / w as usize).min(map.w - 1);
            let p = map.at(cell_r, cell_c);
            let px = img.get_pixel_mut(x, y);
            let alpha = 0.6 * p;
            px.0[0] = (px.0[0] as f64 * (1.0 - alpha) + 255.0 * alpha) as u8;
            px.0[1] = (px.0[1] as f64 * (1.0 - alpha)) as u8;
            px.0[2] = (px.0[2] as f64 * (1.0 - alpha)) as u8;
        }
    }
    let path = dir.join(format!("{}_split.png", scene.id));
    img.save(&path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    .map(|_| ())
}

/// Per-window encoder attention of the window's center token, painted into
/// the window rectangle.
fn dump_attention_maps(
    model: &PetModel,
    store: &crate::numerics::ParamStore,
    dir: &Path,
    scene: &Scene,
) -> Result<()> {
    let image = crate::model::pad_to_multiple(&scene.to_tensor(), model.cfg.query_stride)?;
    let (_g, out) = model.forward_detailed(store, &image, true)?;
    for map in &out.stats.captured {
        if map.key_cells.is_empty() {
            continue;
        }
        let min_r = map.key_cells.iter().map(|c| c.0).min().unwrap();
        let min_c = map.key_cells.iter().map(|c| c.1).min().unwrap();
        let max_r = map.key_cells.iter().map(|c| c.0).max().unwrap();
        let max_c = map.key_cells.iter().map(|c| c.1).max().unwrap();
        let (wh, ww) = (max_r - min_r + 1, max_c - min_c + 1);
        let peak = map.weights.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let mut img = image::GrayImage::new(ww as u32, wh as u32);
        for (cell, wgt) in map.key_cells.iter().zip(&map.weights) {
            let v = (wgt / peak * 255.0) as u8;
            img.put_pixel((cell.1 - min_c) as u32, (cell.0 - min_r) as u32, image::Luma([v]));
        }
        let path = dir.join(format!(
            "{}_attn_l{}_w{}.png",
            scene.id, map.layer, map.window
        ));
        img.save(&path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let preds = load_predictions(&a.pred)?;
    let gts = load_dataset(&a.gt)?;
    let by_id: std::collections::HashMap<&str, &PredictionRecord> =
        preds.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(gts.len());
    for scene in &gts {
        let rec = by_id.get(scene.id.as_str()).ok_or_else(|| {
            Error::Data(format!("no prediction record for scene {}", scene.id))
        })?;
        let pts: Vec<(f64, f64)> = rec.points.iter().map(|p| (p[0], p[1])).collect();
        pairs.push((pts, scene.points.clone()));
    }
    let report = metrics::evaluate(&pairs, &a.sigmas)?;
    print!("{}", report.render_table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        println!("report written to {}", out.display());
    }
    Ok(0)
}

fn cmd_partial(a: PartialArgs) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let scenes = load_dataset(&a.data)?;
    if scenes.iter().any(|s| s.region.is_none()) {
        return Err(Error::Data(
            "partial training needs region rectangles on every scene".into(),
        ));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let opts = PartialOptions {
        dilation_px: a.dilation,
        accept_conf: a.accept_conf,
        dedup_px: a.dedup,
    };
    with_thread_cap(cfg.threads, || -> Result<i32> {
        let run = apps::train_partial(&cfg, &scenes, &opts)?;
        crate::model::save_checkpoint(&a.out.join("step1.ckpt"), &cfg, &run.step1_store)?;
        crate::model::save_checkpoint(&a.out.join("step2.ckpt"), &cfg, &run.step2_store)?;
        println!(
            "two-step training done; {} pseudo labels harvested",
            run.pseudo_count
        );
        Ok(0)
    })
}

fn cmd_refine(a: RefineArgs) -> Result<i32> {
    let (model, store) = PetModel::from_checkpoint(&a.checkpoint)?;
    let scenes = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    with_thread_cap(a.threads, || -> Result<i32> {
        let refined = apps::refine_annotations(&model, &store, &scenes)?;
        let new_points: Vec<(String, Vec<(f64, f64)>)> = refined
            .iter()
            .map(|r| (r.id.clone(), r.refined.iter().map(|p| (p.x, p.y)).collect()))
            .collect();
        let out_manifest = a.out.join("manifest.refined.jsonl");
        data::save_manifest_with_points(&a.data, &out_manifest, &new_points)?;

        #[derive(serde::Serialize)]
        struct DiffLine {
            id: String,
            mean_displacement: f64,
            max_displacement: f64,
            clamped: usize,
        }
        let diff: Vec<DiffLine> = refined
            .iter()
            .map(|r| DiffLine {
                id: r.id.clone(),
                mean_displacement: if r.displacements.is_empty() {
                    0.0
                } else {
                    r.displacements.iter().sum::<f64>() / r.displacements.len() as f64
                },
                max_displacement: r.displacements.iter().cloned().fold(0.0, f64::max),
                clamped: r.refined.iter().filter(|p| p.clamped).count(),
            })
            .collect();
        write_json(&a.out.join("refine_report.json"), &diff)?;
        println!(
            "refined {} scenes; manifest at {}",
            refined.len(),
            out_manifest.display()
        );
        Ok(0)
    })
}

fn cmd_selftest() -> Result<i32> {
    let checks = selftest::run_all()?;
    print!("{}", selftest::render(&checks));
    if selftest::all_passed(&checks) {
        println!("selftest: all {} checks passed", checks.len());
        Ok(0)
    } else {
        Err(Error::Numeric("selftest failures (see lines above)".into()))
    }
}
