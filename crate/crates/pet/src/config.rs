//! Run configuration and derived per-module settings.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the quadtree split decision is made at inference/training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Data-dependent splitting from the learned split map.
    #[default]
    Learned,
    /// Never split: sparse point queries only.
    Never,
    /// Always split: dense point queries only.
    Always,
}

/// Every hyperparameter of the pipeline with its stock default.
///
/// The parsed config is echoed verbatim into every output artifact so a run
/// can always be traced back to its exact settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Initial stride in pixels between level-0 querying points (K).
    pub query_stride: usize,
    /// Maximum number of quadtree splits (L); depth is L+1.
    pub max_splits: usize,
    /// Split-map binarization threshold (strict greater-than).
    pub split_threshold: f64,
    pub split_mode: SplitMode,

    /// Rectangle window height in tokens (s_e).
    pub window_height: usize,
    /// Window aspect ratio (r_e); width = aspect * height.
    pub window_aspect: usize,

    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,

    /// Per-stage backbone widths; three stride-2 stages give feature stride 8.
    pub backbone_channels: Vec<usize>,
    /// Feature/embedding width c.
    pub feature_channels: usize,

    /// Localization loss weight (lambda_1).
    pub lambda_loc: f64,
    /// Split loss weight (lambda_2).
    pub lambda_split: f64,
    /// An image is "dense" when its ground-truth count exceeds this,
    /// normalized to a 256x256 crop area.
    pub dense_count_threshold: f64,

    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square training crop edge in pixels.
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Classification probability threshold at inference.
    pub conf_threshold: f64,

    pub seed: u64,
    /// Worker cap for parallel sections; 0 means all available cores.
    pub threads: usize,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    pub checkpoint_every: usize,
    /// Optional cap on optimizer steps per epoch (subsamples the shuffled
    /// order); None runs the full pass.
    pub steps_per_epoch: Option<usize>,

    pub train_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            query_stride: 8,
            max_splits: 1,
            split_threshold: 0.5,
            split_mode: SplitMode::Learned,
            window_height: 16,
            window_aspect: 2,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 8,
            backbone_channels: vec![16, 32, 64],
            feature_channels: 64,
            lambda_loc: 5.0,
            lambda_split: 0.1,
            dense_count_threshold: 50.0,
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: 8,
            crop: 256,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.5,
            conf_threshold: 0.5,
            seed: 0,
            threads: 0,
            checkpoint_every: 10,
            steps_per_epoch: None,
            train_manifest: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.query_stride;
        if k == 0 || k % (1 << self.max_splits) != 0 {
            return Err(Error::Contract(format!(
                "query_stride {k} must be divisible by 2^max_splits ({})",
                1 << self.max_splits
            )));
        }
        if self.backbone_channels.len() != 3 {
            return Err(Error::Contract(
                "backbone_channels must name exactly three stages (feature stride 8)".into(),
            ));
        }
        if *self.backbone_channels.last().unwrap() != self.feature_channels {
            return Err(Error::Contract(format!(
                "last backbone stage ({}) must equal feature_channels ({})",
                self.backbone_channels.last().unwrap(),
                self.feature_channels
            )));
        }
        if self.feature_channels % self.heads != 0 {
            return Err(Error::Contract(format!(
                "feature_channels {} not divisible by heads {}",
                self.feature_channels, self.heads
            )));
        }
        if self.feature_channels % 4 != 0 {
            return Err(Error::Contract(
                "feature_channels must be divisible by 4 for the 2-D sin/cos embedding".into(),
            ));
        }
        self.windows().validate()?;
        if self.crop % k != 0 {
            return Err(Error::Contract(format!(
                "crop {} must be a multiple of query_stride {k}",
                self.crop
            )));
        }
        if !(self.lambda_loc > 0.0 && self.lambda_split > 0.0) {
            return Err(Error::Contract("lambda_loc and lambda_split must be positive".into()));
        }
        if self.scale_min > self.scale_max || self.scale_min <= 0.0 {
            return Err(Error::Contract("invalid scale range".into()));
        }
        Ok(())
    }

    pub fn windows(&self) -> WindowConfig {
        WindowConfig {
            base_height: self.window_height,
            aspect: self.window_aspect,
            encoder_layers: self.encoder_layers,
            max_level: self.max_splits,
        }
    }

    pub fn quadtree(&self) -> QuadtreeConfig {
        QuadtreeConfig {
            stride: self.query_stride,
            max_splits: self.max_splits,
            split_threshold: self.split_threshold,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.backbone_channels.clone(),
            out_channels: self.feature_channels,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_loc: self.lambda_loc,
            lambda_split: self.lambda_split,
            dense_count_threshold: self.dense_count_threshold,
        }
    }
}

/// Rectangle-window schedule shared by the encoder and decoder.
#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub base_height: usize,
    pub aspect: usize,
    pub encoder_layers: usize,
    pub max_level: usize,
}

impl WindowConfig {
    /// Window (height, width) in tokens for an encoder layer (0-based).
    /// The first half of the layers uses the full size, the rest half size.
    pub fn encoder_window(&self, layer: usize) -> (usize, usize) {
        let s = if layer < self.encoder_layers.div_ceil(2) {
            self.base_height
        } else {
            self.base_height / 2
        };
        (s.max(1), (self.aspect * s).max(1))
    }

    /// Window (height, width) in tokens for decoding queries of a quadtree
    /// level: sparse queries get s_e/2, each deeper level halves again.
    pub fn decoder_window(&self, level: usize) -> (usize, usize) {
        let s = self.base_height >> (level + 1);
        (s.max(1), (self.aspect * s).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspect == 0 || self.base_height == 0 {
            return Err(Error::Contract("window height and aspect must be >= 1".into()));
        }
        for layer in 0..self.encoder_layers {
            let (h, w) = self.encoder_window(layer);
            if h == 0 || w == 0 {
                return Err(Error::Contract(format!(
                    "encoder layer {layer} window collapsed to {h}x{w}"
                )));
            }
            if w != self.aspect * h && h > 1 {
                return Err(Error::Contract(format!(
                    "encoder layer {layer} window {h}x{w} breaks the aspect ratio"
                )));
            }
        }
        if self.base_height % 4 != 0 {
            return Err(Error::Contract(format!(
                "window_height {} must be divisible by 4 so every scheduled window is integral",
                self.base_height
            )));
        }
        Ok(())
    }
}

/// Quadtree seeding and splitting settings.
#[derive(Debug, Clone, Copy)]
pub struct QuadtreeConfig {
    /// Level-0 stride K in pixels.
    pub stride: usize,
    /// Maximum splitting times L.
    pub max_splits: usize,
    /// Strict binarization threshold for the split map.
    pub split_threshold: f64,
}

/// Backbone widths; the three-stage layout pins feature stride to 8.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub out_channels: usize,
}

impl BackboneConfig {
    pub const STRIDE: usize = 8;
}

/// Loss weights and the dense-image rule.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda_loc: f64,
    pub lambda_split: f64,
    /// Count above which an image (normalized to 256x256 area) is "dense".
    pub dense_count_threshold: f64,
}

impl LossConfig {
    /// Dense-image indicator for an image of the given pixel area.
    pub fn is_dense(&self, gt_count: usize, area_px: f64) -> bool {
        let scale = area_px / (256.0 * 256.0);
        gt_count as f64 > self.dense_count_threshold * scale
    }
}
