//! Downstream applications: partial-annotation learning (two-step) and
//! point-annotation refinement.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{Rect, Scene};
use crate::error::{Error, Result};
use crate::model::{PetModel, RefinedPoint};
use crate::numerics::ParamStore;
use crate::trainer::{mix_seed, EpochStats, Trainer};

/// Settings for pseudo-label harvesting in step 2.
#[derive(Debug, Clone, Copy)]
pub struct PartialOptions {
    /// Band beyond the annotated rectangle where inferred points are
    /// accepted, in pixels (stock: two query strides).
    pub dilation_px: f64,
    /// Confidence above which an inferred point becomes a pseudo label.
    pub accept_conf: f64,
    /// Inferred points closer than this to a ground-truth point are dropped.
    pub dedup_px: f64,
}

impl Default for PartialOptions {
    fn default() -> Self {
        PartialOptions {
            dilation_px: 16.0,
            accept_conf: 0.5,
            dedup_px: 4.0,
        }
    }
}

/// Restrict fully-annotated scenes to random rectangles covering `ratio` of
/// each image: points outside are removed and the rectangle recorded.
pub fn make_partial_dataset(scenes: &[Scene], ratio: f64, seed: u64) -> Result<Vec<Scene>> {
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Contract(format!("annotation ratio {ratio} outside (0,1]")));
    }
    let side = ratio.sqrt();
    let mut out = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let (w, h) = (s.width() as f64, s.height() as f64);
        let (rw, rh) = ((w * side).round(), (h * side).round());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64, 0x9A57]));
        let x0 = (rng.random::<f64>() * (w - rw)).floor();
        let y0 = (rng.random::<f64>() * (h - rh)).floor();
        let region = Rect {
            x0,
            y0,
            x1: x0 + rw,
            y1: y0 + rh,
        };
        let mut scene = s.clone();
        scene.points.retain(|&(x, y)| region.contains(x, y));
        scene.region = Some(region);
        out.push(scene);
    }
    Ok(out)
}

/// Inferred annotations around the labeled regions: scene id -> (x, y,
/// confidence), all outside the annotated rectangle, inside the dilation
/// band, above the confidence bar, and away from ground-truth points.
pub type PseudoLabels = BTreeMap<String, Vec<(f64, f64, f64)>>;

pub fn infer_pseudo_labels(
    model: &PetModel,
    store: &ParamStore,
    scenes: &[Scene],
    opts: &PartialOptions,
) -> Result<PseudoLabels> {
    let per_scene: Vec<Result<(String, Vec<(f64, f64, f64)>)>> = scenes
        .par_iter()
        .map(|scene| -> Result<_> {
            let region = scene.region.ok_or_else(|| {
                Error::Contract(format!("scene {} has no annotated region", scene.id))
            })?;
            let band = region
                .dilate(opts.dilation_px)
                .clamp_to(scene.width() as f64, scene.height() as f64);
            let r = model.infer(store, &scene.to_tensor(), opts.accept_conf)?;
            let kept: Vec<(f64, f64, f64)> = r
                .detections
                .into_iter()
                .filter(|&(x, y, _)| !region.contains(x, y) && band.contains(x, y))
                .filter(|&(x, y, _)| {
                    scene
                        .points
                        .iter()
                        .all(|&(gx, gy)| ((gx - x).powi(2) + (gy - y).powi(2)).sqrt() >= opts.dedup_px)
                })
                .collect();
            Ok((scene.id.clone(), kept))
        })
        .collect();
    let mut out = PseudoLabels::new();
    for r in per_scene {
        let (id, pts) = r?;
        out.insert(id, pts);
    }
    Ok(out)
}

/// Ground truth fused with pseudo labels; the annotated region grows to the
/// dilation band so the new points supervise training.
pub fn fuse_pseudo_labels(
    scenes: &[Scene],
    pseudo: &PseudoLabels,
    opts: &PartialOptions,
) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .map(|s| {
            let region = s
                .region
                .ok_or_else(|| Error::Contract(format!("scene {} has no region", s.id)))?;
            let mut fused = s.clone();
            if let Some(extra) = pseudo.get(&s.id) {
                fused
                    .points
                    .extend(extra.iter().map(|&(x, y, _)| (x, y)));
            }
            fused.region = Some(
                region
                    .dilate(opts.dilation_px)
                    .clamp_to(s.width() as f64, s.height() as f64),
            );
            fused.validate()?;
            Ok(fused)
        })
        .collect()
}

/// Outcome of the two-step partial-annotation process.
pub struct PartialRun {
    pub model: PetModel,
    pub step1_store: ParamStore,
    pub step2_store: ParamStore,
    pub pseudo_count: usize,
    pub step1_epochs: Vec<EpochStats>,
    pub step2_epochs: Vec<EpochStats>,
}

/// Step 1: train on the partial annotations (loss restricted to the region).
/// Step 2: infer annotations around the regions, fuse, retrain from the same
/// seeded initialization.
pub fn train_partial(
    cfg: &RunConfig,
    partial_scenes: &[Scene],
    opts: &PartialOptions,
) -> Result<PartialRun> {
    if partial_scenes.iter().all(|s| {
        s.region.map(|r| r.area()) .unwrap_or(0.0) <= 0.0
    }) {
        return Err(Error::Contract(
            "no scene carries a non-empty annotated region".into(),
        ));
    }
    let (model, store) = PetModel::new(cfg)?;
    let mut t1 = Trainer::new(&model, store, cfg.clone());
    let mut step1_epochs = Vec::new();
    for e in 0..cfg.epochs {
        step1_epochs.push(t1.train_epoch(partial_scenes, e)?);
    }
    let step1_store = t1.store;

    let pseudo = infer_pseudo_labels(&model, &step1_store, partial_scenes, opts)?;
    let pseudo_count = pseudo.values().map(|v| v.len()).sum();
    let fused = fuse_pseudo_labels(partial_scenes, &pseudo, opts)?;

    let (model2, store2) = PetModel::new(cfg)?;
    let mut t2 = Trainer::new(&model2, store2, cfg.clone());
    let mut step2_epochs = Vec::new();
    for e in 0..cfg.epochs {
        step2_epochs.push(t2.train_epoch(&fused, e)?);
    }
    Ok(PartialRun {
        model,
        step1_store,
        step2_store: t2.store,
        pseudo_count,
        step1_epochs,
        step2_epochs,
    })
}

/// Refined coordinates for every scene: annotated points become queries and
/// move by the predicted offset. Returns per-scene refined points plus
/// displacement magnitudes (a diff report input).
pub fn refine_annotations(
    model: &PetModel,
    store: &ParamStore,
    scenes: &[Scene],
) -> Result<Vec<RefinedScene>> {
    scenes
        .par_iter()
        .map(|scene| -> Result<RefinedScene> {
            let refined: Vec<RefinedPoint> =
                model.decode_points(store, &scene.to_tensor(), &scene.points)?;
            let displacements = scene
                .points
                .iter()
                .zip(&refined)
                .map(|(&(ox, oy), r)| ((r.x - ox).powi(2) + (r.y - oy).powi(2)).sqrt())
                .collect();
            Ok(RefinedScene {
                id: scene.id.clone(),
                original: scene.points.clone(),
                refined,
                displacements,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RefinedScene {
    pub id: String,
    pub original: Vec<(f64, f64)>,
    pub refined: Vec<RefinedPoint>,
    pub displacements: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn scenes() -> Vec<Scene> {
        generate(
            &SynthConfig {
                width: 64,
                height: 64,
                count_min: 6,
                count_max: 10,
                head_radius_min: 2.0,
                head_radius_max: 3.0,
                perspective: 1.0,
                overlap_cap: 0.0,
                clutter: 2,
                seed: 3,
            },
            6,
        )
        .unwrap()
    }

    #[test]
    fn partial_dataset_masks_points_consistently() {
        let full = scenes();
        let partial = make_partial_dataset(&full, 0.25, 7).unwrap();
        for (f, p) in full.iter().zip(&partial) {
            let r = p.region.unwrap();
            assert!((r.area() / (64.0 * 64.0) - 0.25).abs() < 0.05);
            assert!(p.points.len() <= f.points.len());
            p.validate().unwrap();
            // exactly the in-region originals survive
            let expect: Vec<_> = f
                .points
                .iter()
                .filter(|&&(x, y)| r.contains(x, y))
                .cloned()
                .collect();
            assert_eq!(p.points, expect);
        }
    }

    #[test]
    fn fusion_keeps_ground_truth_verbatim_and_grows_region() {
        let full = scenes();
        let partial = make_partial_dataset(&full, 0.25, 7).unwrap();
        let opts = PartialOptions::default();
        let mut pseudo = PseudoLabels::new();
        // a fake pseudo label in the band of the first scene
        let r0 = partial[0].region.unwrap();
        let band = r0.dilate(opts.dilation_px).clamp_to(64.0, 64.0);
        let candidate = (
            (band.x0 + 1.0).min(63.0),
            (band.y0 + 1.0).min(63.0),
        );
        let outside_region = !r0.contains(candidate.0, candidate.1);
        pseudo.insert(
            partial[0].id.clone(),
            if outside_region {
                vec![(candidate.0, candidate.1, 0.9)]
            } else {
                vec![]
            },
        );
        let fused = fuse_pseudo_labels(&partial, &pseudo, &opts).unwrap();
        for (orig, f) in partial.iter().zip(&fused) {
            for p in &orig.points {
                assert!(f.points.contains(p), "ground truth dropped");
            }
            assert!(f.region.unwrap().area() >= orig.region.unwrap().area());
        }
    }

    #[test]
    fn empty_scene_list_refines_to_empty() {
        let cfg = RunConfig {
            backbone_channels: vec![4, 6, 8],
            feature_channels: 8,
            heads: 2,
            window_height: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            ..RunConfig::default()
        };
        let (model, store) = PetModel::new(&cfg).unwrap();
        assert!(refine_annotations(&model, &store, &[]).unwrap().is_empty());
        // scene with zero points refines to zero points
        let mut s = scenes().remove(0);
        s.points.clear();
        let r = refine_annotations(&model, &store, &[s]).unwrap();
        assert!(r[0].refined.is_empty());
    }
}
