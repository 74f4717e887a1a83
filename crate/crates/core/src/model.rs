//! Full detector: backbone, neck and decoder sharing one parameter store.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::neck::{Esop, NeckConfig, NeckOutput};
use crate::nn::{Mode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            backbone: BackboneConfig::default(),
            neck: NeckConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// 64 px, D = 16, 10 queries: small enough for unit tests and self-checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            backbone: BackboneConfig {
                stem_channels: 8,
                stage_channels: [8, 16, 16, 32],
                blocks_per_stage: [1, 1, 1, 1],
                fca_stages: vec![3, 4],
                attention_heads: 2,
            },
            neck: NeckConfig {
                hidden_dim: 16,
                aifi_heads: 2,
                aifi_ffn_dim: 32,
                large_kernel: 7,
                repblock_depth: 1,
                use_cok: true,
            },
            decoder: DecoderConfig {
                num_stages: 3,
                num_queries: 10,
                hidden_dim: 16,
                heads: 2,
                sampling_points: 2,
                num_levels: 3,
                num_classes: 3,
                ffn_dim: 32,
                gape: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image size {} is not divisible by 32", self.image_size)));
        }
        self.backbone.validate()?;
        self.neck.validate()?;
        self.decoder.validate()?;
        if self.neck.hidden_dim != self.decoder.hidden_dim {
            return Err(Error::Config(format!(
                "neck dim {} differs from decoder dim {}",
                self.neck.hidden_dim, self.decoder.hidden_dim
            )));
        }
        let s = self.image_size;
        let tokens = (s / 8).pow(2) + (s / 16).pow(2) + (s / 32).pow(2);
        if tokens < self.decoder.num_queries {
            return Err(Error::Config(format!(
                "{tokens} encoder tokens at {s}px cannot seed {} queries",
                self.decoder.num_queries
            )));
        }
        Ok(())
    }
}

pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: Esop,
    pub decoder: Decoder,
}

impl Detector {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone, config.image_size)?;
        let neck = Esop::new(&root.pp("neck"), &config.neck, config.backbone.stage_channels, config.image_size)?;
        let decoder = Decoder::new(&root.pp("decoder"), &config.decoder)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            neck,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Backbone and neck: images (B, 3, S, S) to encoder memory.
    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<NeckOutput> {
        let images = images.to_dtype(self.dtype())?;
        let pyramid = self.backbone.forward(&images, mode)?;
        self.neck.forward(&pyramid, mode)
    }
}
