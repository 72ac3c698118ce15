//! Crowd scenes: images with point annotations, manifest I/O, synthetic
//! generation, and training augmentation.

mod augment;
mod synth;

pub use augment::{augment, sample_augment, AugmentParams};
pub use synth::{generate, generate_half_dense, looks_like_head_pixel, HalfDenseScene, SynthConfig};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned rectangle in pixel coordinates, half-open on the far side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn clamp_to(&self, w: f64, h: f64) -> Rect {
        Rect {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn dilate(&self, margin: f64) -> Rect {
        Rect {
            x0: self.x0 - margin,
            y0: self.y0 - margin,
            x1: self.x1 + margin,
            y1: self.y1 + margin,
        }
    }
}

/// An image plus its point annotations (one dot per person) and an optional
/// annotated-region rectangle for partial supervision.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub image: RgbImage,
    pub points: Vec<(f64, f64)>,
    pub region: Option<Rect>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Points inside bounds, and inside the region when one is present.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        for &(x, y) in &self.points {
            if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                return Err(Error::Data(format!(
                    "scene {}: point ({x}, {y}) outside {w}x{h} image",
                    self.id
                )));
            }
            if let Some(r) = &self.region {
                if !r.contains(x, y) {
                    return Err(Error::Data(format!(
                        "scene {}: point ({x}, {y}) outside the annotated region",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Image as a `[H,W,3]` tensor in [0,1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width(), self.height());
        let data = self
            .image
            .as_raw()
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Tensor::new(vec![h, w, 3], data).expect("image tensor")
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image: String,
    points: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    region: Option<[f64; 4]>,
}

/// Write scenes as PNGs plus a line-oriented JSON manifest.
///
/// Layout: `<dir>/manifest.jsonl` and `<dir>/images/<id>.png`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in scenes {
        let path = images.join(format!("{}.png", s.id));
        s.image.save(&path).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<ManifestRecord> = scenes
        .iter()
        .map(|s| ManifestRecord {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            points: s.points.iter().map(|&(x, y)| [x, y]).collect(),
            region: s.region.map(|r| [r.x0, r.y0, r.x1, r.y1]),
        })
        .collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Rewrite an existing manifest with new per-scene points, preserving image
/// paths and regions.
pub fn save_manifest_with_points(
    src_manifest: &Path,
    dst_manifest: &Path,
    new_points: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let records = read_records(src_manifest)?;
    let by_id: std::collections::HashMap<&str, &Vec<(f64, f64)>> =
        new_points.iter().map(|(id, pts)| (id.as_str(), pts)).collect();
    let updated: Vec<ManifestRecord> = records
        .into_iter()
        .map(|mut r| {
            if let Some(pts) = by_id.get(r.id.as_str()) {
                r.points = pts.iter().map(|&(x, y)| [x, y]).collect();
            }
            r
        })
        .collect();
    write_manifest(dst_manifest, &updated)
}

fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// One predictions-manifest line: the dataset schema plus per-point
/// confidence (parallel to `points`).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub image: String,
    pub points: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed prediction record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if rec.points.len() != rec.confidences.len() {
            return Err(Error::Data(format!(
                "{}:{}: {} points but {} confidences",
                path.display(),
                lineno + 1,
                rec.points.len(),
                rec.confidences.len()
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Load a dataset from a manifest; image paths resolve relative to it.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Scene>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_records(manifest)?;
    let mut scenes = Vec::with_capacity(records.len());
    for (lineno, rec) in records.into_iter().enumerate() {
        let img_path = base.join(&rec.image);
        let image = image::open(&img_path)
            .map_err(|e| Error::Data(format!("scene {}: image {}: {e}", rec.id, img_path.display())))?
            .to_rgb8();
        let scene = Scene {
            id: rec.id,
            image,
            points: rec.points.iter().map(|p| (p[0], p[1])).collect(),
            region: rec.region.map(|r| Rect {
                x0: r[0],
                y0: r[1],
                x1: r[2],
                y1: r[3],
            }),
        };
        scene.validate().map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}:{}: {msg}", manifest.display(), lineno + 1)),
            other => other,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
