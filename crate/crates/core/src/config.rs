//! Run configuration: one JSON document with dataset, encoder, loss,
//! augmentation, trainer and evaluator sections. Missing fields take the toy
//! defaults; unknown fields are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::Families;
use crate::dataset::SyntheticConfig;
use crate::encoder::EncoderConfig;
use crate::error::{HdcError, Result};
use crate::evaluator::EvaluatorConfig;
use crate::loss::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch: usize,
    pub clip_len: usize,
    pub steps: usize,
    /// The loss sums over the batch rather than averaging, so this is
    /// roughly a per-example rate of 0.05 divided by the default batch.
    pub lr: f64,
    pub momentum: f64,
    /// Inverse-time decay: the step-`t` rate is `lr / (1 + lr_decay * t)`.
    pub lr_decay: f64,
    /// Added to gradients as `l2 * param`.
    pub l2: f64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Build the next batch on a worker thread while the current step runs.
    pub prefetch: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch: 16,
            clip_len: 8,
            steps: 2000,
            lr: 0.003,
            momentum: 0.9,
            lr_decay: 1e-4,
            l2: 5e-5,
            checkpoint_every: 500,
            prefetch: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("trainer: {m}")));
        if self.batch < 2 {
            return fail(format!(
                "batch must be >= 2 to provide negatives, got {}",
                self.batch
            ));
        }
        if self.clip_len == 0 {
            return fail("clip_len must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("lr_decay", self.lr_decay),
            ("l2", self.l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub augmentation: Families,
    pub trainer: TrainerConfig,
    pub evaluator: EvaluatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: SyntheticConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            augmentation: Families::default(),
            trainer: TrainerConfig::default(),
            evaluator: EvaluatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.trainer.validate()?;
        self.evaluator.validate()?;
        let taps = self.encoder.taps();
        for k in self
            .loss
            .spatial_scales
            .iter()
            .chain(&self.loss.temporal_scales)
        {
            if !taps.contains(k) {
                return Err(HdcError::Config(format!(
                    "loss uses scale {k}, but encoder taps are {taps:?}"
                )));
            }
        }
        if self.trainer.clip_len > self.dataset.frames_per_video {
            return Err(HdcError::Config(format!(
                "clip_len {} exceeds frames_per_video {}",
                self.trainer.clip_len, self.dataset.frames_per_video
            )));
        }
        if self.trainer.batch > self.dataset.num_videos {
            return Err(HdcError::Config(format!(
                "batch {} exceeds num_videos {}",
                self.trainer.batch, self.dataset.num_videos
            )));
        }
        let [ch, cw] = self.augmentation.original.crop_output;
        let [fh, fw] = self.dataset.frame_size;
        if ch > fh || cw > fw {
            return Err(HdcError::Config(format!(
                "crop_output {:?} exceeds frame_size {:?}",
                [ch, cw],
                [fh, fw]
            )));
        }
        if self.encoder.input_channels != 3 {
            return Err(HdcError::Config(format!(
                "encoder input_channels must be 3 for RGB clips, got {}",
                self.encoder.input_channels
            )));
        }
        for row in &self.evaluator.grid {
            row.loss_config(self.loss.tau)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HdcError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| HdcError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_json(r#"{"trainer": {"batchsize": 4}}"#),
            Err(HdcError::Json(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"trainer": {"batch": 1}}"#),
            Err(HdcError::Config(_))
        ));
        assert!(
            RunConfig::from_json(r#"{"loss": {"spatial_scales": [2], "alphas": {"2": 1.0}}}"#)
                .is_err()
        );
    }
}
