//! Line-based `key = value` run configuration. Every tunable has a
//! default; unknown keys are rejected so typos fail loudly. Command-line
//! flags override file values.

use std::path::Path;

use crate::backbone::{Activation, BackboneConfig};
use crate::error::RespelError;
use crate::model::ModelConfig;
use crate::preprocess::CameraIntrinsics;
use crate::synth::{SkeletonSpec, POSE_DIMS};
use crate::train::TrainConfig;
use crate::voting::{BinSpec, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // backbone
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    // heads
    pub variant: Variant,
    pub pose_dims: usize,
    pub bin_r: f64,
    pub bin_b: usize,
    pub r_norm: f64,
    pub literal_log_loss: bool,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_frac: f64,
    pub points_early: usize,
    pub points_late: usize,
    pub curriculum_frac: f64,
    pub augment: bool,
    pub aug_translation_mm: f64,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    pub aug_rotation_z: f64,
    pub val_frac: f64,
    pub seed: u64,
    // segmentation
    pub seg_threshold: f64,
    // synthetic generator
    pub synth_count: usize,
    pub synth_points: usize,
    pub half_space_culling: bool,
    // depth ingestion intrinsics
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let bins = BinSpec::default();
        let train = TrainConfig::default();
        Self {
            widths: backbone.widths,
            activation: backbone.activation,
            bn_momentum: backbone.bn_momentum,
            bn_eps: backbone.bn_eps,
            variant: Variant::Regression,
            pose_dims: POSE_DIMS,
            bin_r: bins.r,
            bin_b: bins.bins,
            r_norm: 150.0,
            literal_log_loss: false,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            final_lr_frac: train.final_lr_frac,
            points_early: train.points_early,
            points_late: train.points_late,
            curriculum_frac: train.curriculum_frac,
            augment: train.augment,
            aug_translation_mm: train.augment_ranges.translation_mm,
            aug_scale_lo: train.augment_ranges.scale_lo,
            aug_scale_hi: train.augment_ranges.scale_hi,
            aug_rotation_z: train.augment_ranges.rotation_z,
            val_frac: 0.1,
            seed: train.seed,
            seg_threshold: 0.1,
            synth_count: 100,
            synth_points: 2048,
            half_space_culling: false,
            fx: 475.0,
            fy: 475.0,
            cx: 320.0,
            cy: 240.0,
        }
    }
}

fn bad(key: &str, value: &str, e: impl std::fmt::Display) -> RespelError {
    RespelError::Config(format!("key '{key}': bad value '{value}': {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RespelError> {
        macro_rules! parse {
            ($field:ident) => {
                self.$field = value.parse().map_err(|e| bad(key, value, e))?
            };
        }
        match key {
            "widths" => {
                let widths: Result<Vec<usize>, _> =
                    value.split(',').map(|w| w.trim().parse()).collect();
                self.widths = widths.map_err(|e| bad(key, value, e))?;
                if self.widths.is_empty() {
                    return Err(bad(key, value, "needs at least one width"));
                }
            }
            "activation" => {
                self.activation = match value {
                    "sigmoid" => Activation::Sigmoid,
                    "relu" => Activation::Relu,
                    other => return Err(bad(key, other, "expected sigmoid|relu")),
                }
            }
            "bn_momentum" => parse!(bn_momentum),
            "bn_eps" => parse!(bn_eps),
            "variant" => self.variant = value.parse().map_err(|e| bad(key, value, e))?,
            "pose_dims" => {
                parse!(pose_dims);
                if self.pose_dims == 0 || !self.pose_dims.is_multiple_of(3) {
                    return Err(bad(key, value, "must be a positive multiple of 3"));
                }
            }
            "bin_r" => parse!(bin_r),
            "bin_b" => parse!(bin_b),
            "r_norm" => parse!(r_norm),
            "literal_log_loss" => parse!(literal_log_loss),
            "epochs" => parse!(epochs),
            "batch_size" => parse!(batch_size),
            "lr" => parse!(lr),
            "final_lr_frac" => parse!(final_lr_frac),
            "points_early" => parse!(points_early),
            "points_late" => parse!(points_late),
            "curriculum_frac" => parse!(curriculum_frac),
            "augment" => parse!(augment),
            "aug_translation_mm" => parse!(aug_translation_mm),
            "aug_scale_lo" => parse!(aug_scale_lo),
            "aug_scale_hi" => parse!(aug_scale_hi),
            "aug_rotation_z" => parse!(aug_rotation_z),
            "val_frac" => parse!(val_frac),
            "seed" => parse!(seed),
            "seg_threshold" => parse!(seg_threshold),
            "synth_count" => parse!(synth_count),
            "synth_points" => parse!(synth_points),
            "half_space_culling" => parse!(half_space_culling),
            "fx" => parse!(fx),
            "fy" => parse!(fy),
            "cx" => parse!(cx),
            "cy" => parse!(cy),
            other => {
                return Err(RespelError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn load(path: &Path) -> Result<Self, RespelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RespelError::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    i + 1
                ))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn model_config(&self) -> Result<ModelConfig, RespelError> {
        Ok(ModelConfig {
            backbone: BackboneConfig {
                widths: self.widths.clone(),
                activation: self.activation,
                bn_momentum: self.bn_momentum,
                bn_eps: self.bn_eps,
            },
            variant: self.variant,
            pose_dims: self.pose_dims,
            bin_spec: BinSpec::new(self.bin_r, self.bin_b)?,
            r_norm: self.r_norm,
            literal_log_loss: self.literal_log_loss,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            final_lr_frac: self.final_lr_frac,
            points_early: self.points_early,
            points_late: self.points_late,
            curriculum_frac: self.curriculum_frac,
            augment: self.augment,
            augment_ranges: crate::preprocess::AugmentRanges {
                translation_mm: self.aug_translation_mm,
                scale_lo: self.aug_scale_lo,
                scale_hi: self.aug_scale_hi,
                rotation_z: self.aug_rotation_z,
            },
            seed: self.seed,
        }
    }

    pub fn skeleton_spec(&self) -> SkeletonSpec {
        SkeletonSpec {
            half_space_culling: self.half_space_culling,
            ..SkeletonSpec::default()
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, RespelError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_through_model_config() {
        let cfg = RunConfig::default();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.backbone.widths, vec![128, 256, 512]);
        assert_eq!(model.pose_dims, POSE_DIMS);
        assert_eq!(model.bin_spec.bins, 60);
    }

    #[test]
    fn file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nwidths = 8, 16\nvariant = detection\nepochs = 3\naugment = true\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.widths, vec![8, 16]);
        assert_eq!(cfg.variant, Variant::Detection);
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.augment);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("no_such_key", "1"),
            Err(RespelError::Config(_))
        ));
    }

    #[test]
    fn bad_value_rejected_with_key_name() {
        let mut cfg = RunConfig::default();
        match cfg.set("epochs", "many") {
            Err(RespelError::Config(msg)) => assert!(msg.contains("epochs")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs 3\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(RespelError::Config(_))
        ));
    }
}
