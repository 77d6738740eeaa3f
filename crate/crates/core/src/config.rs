//! Run configuration: one JSON document describing data, model, training,
//! sampling and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CANVAS, PROMPT_LEN, VOCAB_SIZE};
use crate::dit::DenoiserConfig;
use crate::error::{Error, Result};
use crate::mask::Palette;
use crate::mogle::{Composition, GatingMode, MogleConfig};

pub const SEED_ENV: &str = "MGLE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    /// Finetuning steps.
    pub steps: usize,
    pub pretrain_steps: usize,
    pub drop_prob: f64,
    pub lr: f64,
    pub wd: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub feature_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub expert_composition: Composition,
    pub gating_mode: GatingMode,
    /// False replaces every expert by the identity map.
    pub experts: bool,
    pub mask_palette: Palette,
    pub lora: LoraConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 1000 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            steps: 2000,
            pretrain_steps: 2000,
            drop_prob: 0.1,
            lr: 3e-3,
            wd: 0.01,
            checkpoint_every: 0,
        }
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            guidance: 1.0,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2048,
            n_test: 256,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            feature_seed: 7,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            image_size: CANVAS,
            patch_size: 4,
            token_dim: 48,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            n_classes: 4,
            expert_composition: Composition::Both,
            gating_mode: GatingMode::Matrix,
            experts: true,
            mask_palette: Palette::face(),
            lora: LoraConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch_size
            ));
        }
        if self.token_dim != 3 * self.patch_size * self.patch_size {
            return bad(format!(
                "token dim {} must equal 3·patch² = {}",
                self.token_dim,
                3 * self.patch_size * self.patch_size
            ));
        }
        if self.image_size != CANVAS {
            return bad(format!("the synthetic data is {CANVAS}x{CANVAS}"));
        }
        if self.n_classes + 1 != self.mask_palette.colors().len() {
            return bad(format!(
                "{} classes need a palette of {} colours",
                self.n_classes,
                self.n_classes + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.train.drop_prob) {
            return bad(format!(
                "drop probability {} outside [0, 1]",
                self.train.drop_prob
            ));
        }
        if self.train.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.lora.rank == 0 {
            return bad("LoRA rank must be positive".into());
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.t_max {
            return bad(format!(
                "{} sampling steps with T = {}",
                self.sample.steps, self.schedule.t_max
            ));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return bad("empty data split".into());
        }
        self.denoiser().validate()
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let grid = self.image_size / self.patch_size.max(1);
        DenoiserConfig {
            blocks: self.blocks,
            dim: self.token_dim,
            heads: self.heads,
            image_tokens: grid * grid,
            prompt_tokens: PROMPT_LEN,
            vocab: VOCAB_SIZE,
            mlp_ratio: self.mlp_ratio,
            max_t: self.schedule.t_max,
        }
    }

    pub fn mogle(&self) -> MogleConfig {
        MogleConfig {
            composition: self.expert_composition,
            gating: self.gating_mode,
            experts: self.experts,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from `path` (or defaults) and apply the seed override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(cfg)
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> String {
        // serde_json's map is ordered by key, so the value form is canonical
        serde_json::to_value(self)
            .expect("serialisable")
            .to_string()
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
