//! Training loop: seeded batching and augmentation, per-sample graphs with
//! pack-weighted gradient accumulation, and Adam updates with separate
//! backbone / transformer learning rates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{LossConfig, RunConfig};
use crate::data::{augment, sample_augment, Rect, Scene};
use crate::error::{Error, Result};
use crate::loss::{
    match_queries, pack_weights, point_query_loss, split_loss, MatchResult,
};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ForwardOutput, PetModel};
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Var};

/// Deterministic seed mixing (splitmix64 finalizer over combined words).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}

/// Per-image differentiable loss terms plus the match, honoring an optional
/// annotated-region restriction (classification and matching then consider
/// only in-region queries and the split terms only in-region cells).
pub fn build_image_loss(
    g: &mut Graph,
    fwd: &ForwardOutput,
    gts_px: &[(f64, f64)],
    img_w: usize,
    img_h: usize,
    region: Option<Rect>,
    loss_cfg: &LossConfig,
) -> Result<(Var, Var, bool, MatchResult)> {
    let (logits, locations) = (fwd.logits, fwd.locations);
    let gts_norm: Vec<(f64, f64)> = gts_px
        .iter()
        .map(|&(x, y)| (x / img_w as f64, y / img_h as f64))
        .collect();

    let (cls_logits, cls_locs, probs, locs) = match region {
        None => {
            let (probs, locs) = read_probs_locs(g, logits, locations);
            (logits, locations, probs, locs)
        }
        Some(r) => {
            let eligible: Vec<Option<usize>> = fwd
                .query_points
                .iter()
                .enumerate()
                .filter(|(_, &(x, y))| r.contains(x, y))
                .map(|(i, _)| Some(i))
                .collect();
            if eligible.is_empty() {
                return Err(Error::Contract(
                    "annotated region contains no queries".into(),
                ));
            }
            let sub_logits = g.gather_rows(logits, &eligible)?;
            let sub_locs = g.gather_rows(locations, &eligible)?;
            let (probs, locs) = read_probs_locs(g, sub_logits, sub_locs);
            (sub_logits, sub_locs, probs, locs)
        }
    };

    let matched = match_queries(&probs, &locs, &gts_norm, loss_cfg.lambda_loc)?;
    let pq = point_query_loss(g, cls_logits, cls_locs, &gts_norm, &matched, loss_cfg.lambda_loc)?;

    let area = region
        .map(|r| r.area())
        .unwrap_or((img_w * img_h) as f64);
    let is_dense = loss_cfg.is_dense(gts_px.len(), area);

    let split_var = match region {
        None => fwd.split_map,
        Some(r) => {
            let shape = g.value(fwd.split_map).shape().to_vec();
            let (h, w) = (shape[0], shape[1]);
            let k = (img_w / w) as f64;
            let cells: Vec<Option<usize>> = (0..h * w)
                .filter(|&i| {
                    let (row, col) = (i / w, i % w);
                    let cx = (col as f64 + 0.5) * k;
                    let cy = (row as f64 + 0.5) * k;
                    r.contains(cx, cy)
                })
                .map(Some)
                .collect();
            if cells.is_empty() {
                return Err(Error::Contract(
                    "annotated region covers no split-map cells".into(),
                ));
            }
            let flat = g.reshape(fwd.split_map, &[h * w, 1])?;
            g.gather_rows(flat, &cells)?
        }
    };
    let split = split_loss(g, split_var, is_dense)?;
    Ok((pq, split, is_dense, matched))
}

fn read_probs_locs(g: &Graph, logits: Var, locations: Var) -> (Vec<f64>, Vec<(f64, f64)>) {
    let lt = g.value(logits);
    let n = lt.dim(0);
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let (l0, l1) = (lt.data()[i * 2], lt.data()[i * 2 + 1]);
        let m = l0.max(l1);
        probs.push((l1 - m).exp() / ((l0 - m).exp() + (l1 - m).exp()));
    }
    let lv = g.value(locations);
    let locs = (0..n).map(|i| (lv.data()[i * 2], lv.data()[i * 2 + 1])).collect();
    (probs, locs)
}

#[derive(Debug, Clone, Default)]
pub struct PackStats {
    pub pq: f64,
    pub split: f64,
    pub total: f64,
    pub batches: usize,
}

impl PackStats {
    fn add(&mut self, pq: f64, split: f64, total: f64) {
        self.pq += pq;
        self.split += split;
        self.total += total;
        self.batches += 1;
    }

    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.batches.max(1) as f64;
        (self.pq / n, self.split / n, self.total / n)
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub sparse: PackStats,
    pub dense: PackStats,
    /// Mean of the dual-supervision total over the epoch's steps.
    pub mean_total: f64,
    pub steps: usize,
}

pub struct Trainer<'m> {
    model: &'m PetModel,
    pub store: ParamStore,
    adam: Adam,
    cfg: RunConfig,
    total_steps: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m PetModel, store: ParamStore, cfg: RunConfig) -> Self {
        let adam = Adam::new(
            &store,
            AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        );
        Trainer {
            model,
            store,
            adam,
            cfg,
            total_steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.total_steps
    }

    /// One pass over the dataset in seeded shuffled order.
    pub fn train_epoch(&mut self, scenes: &[Scene], epoch: usize) -> Result<EpochStats> {
        if scenes.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64, 0xB47C]));
        order.shuffle(&mut rng);

        let mut stats = EpochStats {
            epoch,
            sparse: PackStats::default(),
            dense: PackStats::default(),
            mean_total: 0.0,
            steps: 0,
        };
        let step_cap = self.cfg.steps_per_epoch.unwrap_or(usize::MAX).max(1);
        for (step, chunk) in order.chunks(self.cfg.batch_size.max(1)).enumerate() {
            if step >= step_cap {
                break;
            }
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let step_stats = self.train_step(&batch, epoch, step)?;
            if step_stats.sparse.batches > 0 {
                stats
                    .sparse
                    .add(step_stats.sparse.pq, step_stats.sparse.split, step_stats.sparse.total);
            }
            if step_stats.dense.batches > 0 {
                stats
                    .dense
                    .add(step_stats.dense.pq, step_stats.dense.split, step_stats.dense.total);
            }
            stats.mean_total += step_stats.total;
            stats.steps += 1;
        }
        stats.mean_total /= stats.steps.max(1) as f64;
        Ok(stats)
    }

    /// One optimizer step on an explicit batch.
    pub fn train_step(
        &mut self,
        batch: &[&Scene],
        epoch: usize,
        step: usize,
    ) -> Result<StepStats> {
        let cfg = &self.cfg;
        let loss_cfg = cfg.loss();

        struct SampleOut {
            graph: Graph,
            pq: f64,
            split: f64,
            loss_var: Var,
            is_dense: bool,
        }

        let samples: Vec<Result<SampleOut>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, scene)| -> Result<SampleOut> {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    cfg.seed,
                    epoch as u64,
                    step as u64,
                    slot as u64,
                ]));
                let crop = cfg.crop.min(scene.width().min(scene.height())) as u32;
                let params = sample_augment(
                    scene.width() as u32,
                    scene.height() as u32,
                    crop,
                    (cfg.scale_min, cfg.scale_max),
                    cfg.flip_prob,
                    &mut rng,
                )?;
                let view = augment(scene, crop, &params)?;

                let mut g = Graph::new();
                let image = view.to_tensor();
                let fwd = self.model.forward_on_graph(&mut g, &self.store, &image, None, false)?;
                let (pq, split, is_dense, _) = build_image_loss(
                    &mut g,
                    &fwd,
                    &view.points,
                    view.width(),
                    view.height(),
                    view.region,
                    &loss_cfg,
                )?;
                let split_term = g.scale(split, cfg.lambda_split)?;
                let loss_var = g.add(pq, split_term)?;
                let (pq_v, split_v) = (g.value(pq).item(), g.value(split).item());
                if !g.value(loss_var).item().is_finite() {
                    return Err(Error::Numeric("non-finite training loss".into()));
                }
                g.backward(loss_var)?;
                Ok(SampleOut {
                    graph: g,
                    pq: pq_v,
                    split: split_v,
                    loss_var,
                    is_dense,
                })
            })
            .collect();

        let samples: Vec<SampleOut> = samples.into_iter().collect::<Result<_>>()?;
        let flags: Vec<bool> = samples.iter().map(|s| s.is_dense).collect();
        let weights = pack_weights(&flags);

        self.store.zero_grads();
        let mut stats = StepStats::default();
        for (s, &w) in samples.iter().zip(&weights) {
            s.graph.accumulate_param_grads(&mut self.store, w);
            let total = s.graph.value(s.loss_var).item();
            if s.is_dense {
                stats.dense.add(s.pq, s.split, total);
            } else {
                stats.sparse.add(s.pq, s.split, total);
            }
            stats.total += w * total;
        }

        let (lr_backbone, lr_transformer) = (cfg.lr_backbone, cfg.lr_transformer);
        self.adam.step(&mut self.store, |name| {
            if name.starts_with("backbone.") {
                lr_backbone
            } else {
                lr_transformer
            }
        });
        self.total_steps += 1;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub sparse: PackStats,
    pub dense: PackStats,
    /// Dual-supervision total for this step (pack means summed).
    pub total: f64,
}

/// Thresholded evaluation of a model over a dataset.
pub fn evaluate_on_scenes(
    model: &PetModel,
    store: &ParamStore,
    scenes: &[Scene],
    conf_threshold: f64,
    sigmas: &[f64],
) -> Result<EvalReport> {
    let pairs: Vec<Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)>> = scenes
        .par_iter()
        .map(|scene| -> Result<_> {
            let r = model.infer(store, &scene.to_tensor(), conf_threshold)?;
            let preds = r.detections.iter().map(|&(x, y, _)| (x, y)).collect();
            Ok((preds, scene.points.clone()))
        })
        .collect();
    let pairs: Vec<_> = pairs.into_iter().collect::<Result<_>>()?;
    evaluate(&pairs, sigmas)
}

/// Install a rayon pool honoring the `threads` cap (0 = default) and run `f`
/// inside it.
pub fn with_thread_cap<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(f)
}
