//! Experiment configuration in a flat `key = value` file (TOML subset).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{AnchorConfig, DetectorConfig, DexEncoderConfig, MatcherConfig};
use crate::error::{Error, Result};
use crate::losses::FocalConfig;
use crate::pseudo::PseudoConfig;
use crate::teacher_student::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Re-split the training pool with this labeled fraction (seeded by
    /// `seed`); when absent the manifest's split is used.
    pub labeled_fraction: Option<f64>,
    pub seed: u64,
    pub precision: Precision,

    pub iterations: usize,
    pub batch_size: usize,
    pub sample_ratio: f64,
    pub sr_decay_frac: f64,
    pub burn_in: usize,
    pub ema_rate: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub offset_lr_mult: f64,
    pub grad_clip_norm: f64,
    pub lambda: f64,
    pub supervised_only: bool,
    pub teacher_strong: bool,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub trace_students: bool,

    pub sigma: f64,
    pub mu: f64,
    pub r: f64,
    pub adso: bool,
    pub fusion_box: bool,
    pub dex: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,

    pub backbone_channels: Vec<usize>,
    pub encoder_channels: usize,
    pub block_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub head_convs: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub match_k: usize,
    pub pos_iou_floor: f64,
    pub ignore_iou: f64,
    pub prior_prob: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = DetectorConfig::default();
        ExperimentConfig {
            dataset: String::new(),
            labeled_fraction: None,
            seed: t.seed,
            precision: Precision::F32,
            iterations: t.iterations,
            batch_size: t.batch_size,
            sample_ratio: t.sample_ratio,
            sr_decay_frac: t.sr_decay_frac,
            burn_in: t.burn_in,
            ema_rate: t.ema_rate,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_frac: t.warmup_frac,
            lr_milestones: t.lr_milestones,
            lr_gamma: t.lr_gamma,
            offset_lr_mult: t.offset_lr_mult,
            grad_clip_norm: t.grad_clip_norm,
            lambda: t.lambda,
            supervised_only: t.supervised_only,
            teacher_strong: t.teacher_strong,
            eval_interval: t.eval_interval,
            checkpoint_interval: t.checkpoint_interval,
            trace_students: t.trace_students,
            sigma: t.pseudo.sigma,
            mu: t.pseudo.mu,
            r: t.pseudo.r,
            adso: t.pseudo.use_adso,
            fusion_box: t.pseudo.use_fusion,
            dex: m.encoder.use_deformable,
            focal_alpha: t.focal.alpha,
            focal_gamma: t.focal.gamma,
            backbone_channels: m.backbone_channels,
            encoder_channels: m.encoder.projected_channels,
            block_channels: m.encoder.block_channels,
            dilation_rates: m.encoder.dilation_rates,
            head_convs: m.head_convs,
            anchor_scales: m.anchors.scales,
            anchor_ratios: m.anchors.aspect_ratios,
            match_k: m.matcher.k,
            pos_iou_floor: m.matcher.pos_iou_floor,
            ignore_iou: m.matcher.ignore_iou,
            prior_prob: m.prior_prob,
            pre_nms_top_k: m.pre_nms_top_k,
            nms_iou: m.nms_iou,
        }
    }
}

impl ExperimentConfig {
    pub fn detector(&self) -> DetectorConfig {
        let last = self.backbone_channels.last().copied().unwrap_or(0);
        DetectorConfig {
            backbone_channels: self.backbone_channels.clone(),
            encoder: DexEncoderConfig {
                in_channels: last,
                projected_channels: self.encoder_channels,
                block_channels: self.block_channels,
                num_dilated_blocks: self.dilation_rates.len(),
                dilation_rates: self.dilation_rates.clone(),
                use_deformable: self.dex,
            },
            head_convs: self.head_convs,
            anchors: AnchorConfig {
                stride: 1usize << self.backbone_channels.len().min(16),
                scales: self.anchor_scales.clone(),
                aspect_ratios: self.anchor_ratios.clone(),
            },
            matcher: MatcherConfig {
                k: self.match_k,
                pos_iou_floor: self.pos_iou_floor,
                ignore_iou: self.ignore_iou,
            },
            prior_prob: self.prior_prob,
            pre_nms_top_k: self.pre_nms_top_k,
            nms_iou: self.nms_iou,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            sample_ratio: self.sample_ratio,
            sr_decay_frac: self.sr_decay_frac,
            burn_in: self.burn_in,
            ema_rate: self.ema_rate,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            lr_milestones: self.lr_milestones.clone(),
            lr_gamma: self.lr_gamma,
            offset_lr_mult: self.offset_lr_mult,
            grad_clip_norm: self.grad_clip_norm,
            lambda: self.lambda,
            pseudo: PseudoConfig {
                sigma: self.sigma,
                mu: self.mu,
                r: self.r,
                use_adso: self.adso,
                use_fusion: self.fusion_box,
            },
            focal: FocalConfig {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
            },
            supervised_only: self.supervised_only,
            teacher_strong: self.teacher_strong,
            eval_interval: self.eval_interval,
            checkpoint_interval: self.checkpoint_interval,
            trace_students: self.trace_students,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("labeled_fraction must lie in (0, 1], got {f}")));
            }
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0 && self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_alpha must lie in (0, 1) and focal_gamma be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.pos_iou_floor) || !(0.0..=1.0).contains(&self.ignore_iou) || self.match_k == 0 {
            return Err(Error::Config("matcher IoU thresholds must lie in [0, 1] and k be positive".into()));
        }
        self.detector().validate()?;
        self.train().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
