//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSceneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eval::SCORE_FLOOR;
use crate::model::ModelConfig;
use crate::neck::NeckConfig;
use crate::sqr::{LossConfig, SqrVariant};

/// Environment variable that relocates every run's output directory.
pub const OUTPUT_ROOT_ENV: &str = "HEGS_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Train images use scene indices 0..train_size, validation the next val_size.
    Synthetic {
        train_size: usize,
        val_size: usize,
        scene: SyntheticSceneConfig,
    },
    Coco {
        train_annotations: PathBuf,
        val_annotations: PathBuf,
        #[serde(default)]
        strict: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    #[serde(default)]
    pub cosine_schedule: bool,
    #[serde(default)]
    pub flip_augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
            cosine_schedule: false,
            flip_augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub score_floor: f64,
    /// Validate every this many epochs (and always after the last one).
    pub every_epochs: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_floor: SCORE_FLOOR,
            every_epochs: 1,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub sqr_variant: SqrVariant,
    /// Loss weight of recollected (non-primary) query groups.
    pub recollect_weight: f64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// 128 px synthetic benchmark, D = 64, 60 epochs.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            precision: Precision::F32,
            sqr_variant: SqrVariant::II,
            recollect_weight: 1.0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            dataset: DatasetConfig::Synthetic {
                train_size: 500,
                val_size: 100,
                scene: SyntheticSceneConfig::default(),
            },
        }
    }

    /// Full-size profile: 640 px, D = 256, 300 epochs, batch 16.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/paper");
        c.model = ModelConfig {
            image_size: 640,
            backbone: BackboneConfig {
                stem_channels: 32,
                stage_channels: [64, 128, 256, 512],
                blocks_per_stage: [2, 2, 2, 2],
                fca_stages: vec![3, 4],
                attention_heads: 8,
            },
            neck: NeckConfig {
                hidden_dim: 256,
                aifi_heads: 8,
                aifi_ffn_dim: 1024,
                large_kernel: 31,
                repblock_depth: 3,
                use_cok: true,
            },
            decoder: DecoderConfig {
                num_stages: 3,
                num_queries: 300,
                hidden_dim: 256,
                heads: 8,
                sampling_points: 4,
                num_levels: 3,
                num_classes: 10,
                ffn_dim: 1024,
                gape: true,
            },
        };
        c.optim.epochs = 300;
        c.optim.batch_size = 16;
        c.eval.batch_size = 16;
        c.dataset = DatasetConfig::Coco {
            train_annotations: PathBuf::from("data/visdrone/train.json"),
            val_annotations: PathBuf::from("data/visdrone/val.json"),
            strict: false,
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk, paper)"))),
        }
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate_values(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if o.epochs == 0 || o.batch_size == 0 || self.eval.batch_size == 0 || self.eval.every_epochs == 0 {
            return Err(Error::Config("epochs, batch sizes and eval interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps be positive".into()));
        }
        if o.weight_decay < 0.0 || o.grad_clip < 0.0 || self.recollect_weight < 0.0 {
            return Err(Error::Config("weight decay, clip and recollection weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.eval.score_floor) {
            return Err(Error::Config("score floor must lie in [0,1)".into()));
        }
        if let DatasetConfig::Synthetic { scene, train_size, val_size } = &self.dataset {
            scene.validate()?;
            if *train_size == 0 || *val_size == 0 {
                return Err(Error::Config("synthetic splits must be non-empty".into()));
            }
            if scene.num_classes != self.model.decoder.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, decoder predicts {}",
                    scene.num_classes, self.model.decoder.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Full validation, including that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if let DatasetConfig::Coco { train_annotations, val_annotations, .. } = &self.dataset {
            for p in [train_annotations, val_annotations] {
                if !p.is_file() {
                    return Err(Error::Config(format!("annotation file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads and validates a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetConfig::Coco { train_annotations, val_annotations, .. } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train_annotations, val_annotations] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Output directory after applying the output-root override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() && self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            Some(root) if !root.is_empty() => {
                PathBuf::from(root).join(self.output_dir.file_name().unwrap_or_default())
            }
            _ => self.output_dir.clone(),
        }
    }
}
