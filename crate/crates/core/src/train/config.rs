use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::optim::{LionConfig, OptimizerConfig, SgdConfig};

/// Training protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Scratch,
    Pretrain,
    Finetune,
    Probe,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Pretrain => "pretrain",
            TrainMode::Finetune => "finetune",
            TrainMode::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and always after
    /// the last one). 0 evaluates only at the end.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Linear learning-rate ramp over this many epochs; 0 disables it.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Fine-tuning only: resize inputs to the pretrained resolution.
    #[serde(default = "yes")]
    pub auto_resize: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Protocol defaults. Batch sizes are scaled down for a single machine.
    pub fn defaults(mode: TrainMode) -> Self {
        let flip_crop_mix = AugmentConfig {
            flip: true,
            crop_pad: 4,
            mixup_alpha: 0.8,
            label_smoothing: 0.3,
        };
        let (epochs, batch_size, optimizer, augment) = match mode {
            TrainMode::Scratch => (100, 256, OptimizerConfig::Lion(LionConfig::new(5e-5)), flip_crop_mix),
            TrainMode::Pretrain => (
                400,
                1024,
                OptimizerConfig::Lion(LionConfig {
                    weight_decay: 1e-3,
                    ..LionConfig::new(1e-5)
                }),
                flip_crop_mix,
            ),
            TrainMode::Finetune => (
                50,
                256,
                OptimizerConfig::SgdMomentum(SgdConfig {
                    head_lr: 0.01,
                    body_lr: 0.001,
                    momentum: 0.9,
                }),
                AugmentConfig {
                    flip: true,
                    crop_pad: 4,
                    ..AugmentConfig::none()
                },
            ),
            TrainMode::Probe => (50, 256, OptimizerConfig::Lion(LionConfig::new(1e-5)), AugmentConfig::none()),
        };
        Self {
            mode,
            epochs,
            batch_size,
            optimizer,
            augment,
            seed: 0,
            eval_every: 1,
            warmup_epochs: 0,
            grad_clip: None,
            auto_resize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.mode == TrainMode::Probe && self.augment.spatial() {
            return Err(Error::InvalidConfig(
                "probe trains on precomputed features; flip/crop cannot apply".into(),
            ));
        }
        Ok(())
    }

    /// Learning-rate multiplier for the given 0-based epoch and in-epoch step.
    pub fn lr_scale(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            return 1.0;
        }
        let total = (self.warmup_epochs * steps_per_epoch.max(1)) as f64;
        let done = (epoch * steps_per_epoch + step + 1) as f64;
        (done / total).min(1.0)
    }
}
