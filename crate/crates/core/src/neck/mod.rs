//! Efficient small-object pyramid.
//!
//! S2 is rescued by space-to-depth and joined with S3 into S23 (stride 8).
//! S5 goes through AIFI and a top-down fusion with S4 into S45 (stride 16).
//! The omni-kernel fusion merges S23 with the upsampled S45 into S2345, and a
//! bottom-up path rebuilds strides 16 and 32 from it. The three levels are
//! flattened into one token sequence for the decoder.

pub mod aifi;
pub mod fusion;
pub mod omni;
pub mod spd;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use aifi::{sincos_2d, Aifi, AifiOutput};
pub use fusion::{CokBlock, CspRepFusion, OkFusion, RepBlock};
pub use omni::{Dcam, Fsam, OmniBranches, OmniKernel};
pub use spd::{spd_inverse, spd_rearrange, SpdConv};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, PyramidFeatures};
use crate::nn::{Act, Conv2d, ConvBn, Mode, ParamBuilder};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    pub hidden_dim: usize,
    pub aifi_heads: usize,
    pub aifi_ffn_dim: usize,
    pub large_kernel: usize,
    pub repblock_depth: usize,
    /// Set to false for the ablation without the COK block.
    #[serde(default = "yes")]
    pub use_cok: bool,
}

fn yes() -> bool {
    true
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            aifi_heads: 4,
            aifi_ffn_dim: 128,
            large_kernel: 31,
            repblock_depth: 1,
            use_cok: true,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("hidden dim {d} must be a positive multiple of 4")));
        }
        if self.aifi_heads == 0 || d % self.aifi_heads != 0 {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {} AIFI heads", self.aifi_heads)));
        }
        if self.large_kernel % 2 == 0 {
            return Err(Error::Config(format!("large kernel must be odd, got {}", self.large_kernel)));
        }
        if self.aifi_ffn_dim == 0 {
            return Err(Error::Config("AIFI feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

/// Flattened multi-level encoder output.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    /// (B, Σ HᵢWᵢ, D).
    pub tokens: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
    pub level_start_offsets: Vec<usize>,
}

impl EncoderMemory {
    pub fn from_levels(levels: &[Tensor]) -> Result<Self> {
        let mut shapes = Vec::with_capacity(levels.len());
        let mut offsets = Vec::with_capacity(levels.len());
        let mut flat = Vec::with_capacity(levels.len());
        let mut start = 0;
        for l in levels {
            let (_, _, h, w) = l.dims4()?;
            shapes.push((h, w));
            offsets.push(start);
            start += h * w;
            flat.push(ops::to_tokens(l)?);
        }
        let m = Self {
            tokens: Tensor::cat(&flat, 1)?,
            level_shapes: shapes,
            level_start_offsets: offsets,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, s, _) = self.tokens.dims3()?;
        let total: usize = self.level_shapes.iter().map(|(h, w)| h * w).sum();
        if total != s {
            return Err(Error::Shape(format!("memory holds {s} tokens, levels need {total}")));
        }
        let mut want = 0;
        for (o, (h, w)) in self.level_start_offsets.iter().zip(&self.level_shapes) {
            if *o != want {
                return Err(Error::Shape(format!("level offset {o}, expected {want}")));
            }
            want += h * w;
        }
        if self.level_start_offsets.len() != self.level_shapes.len() {
            return Err(Error::Shape("one offset per level required".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.level_shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }
}

pub struct NeckOutput {
    pub memory: EncoderMemory,
    /// Input pyramid with the S23, S45 and S2345 slots filled.
    pub pyramid: PyramidFeatures,
    /// AIFI attention (B, heads, H5·W5, H5·W5).
    pub aifi_attention: Tensor,
    pub s5_hw: (usize, usize),
}

#[derive(Clone)]
pub struct Esop {
    pub config: NeckConfig,
    pub spd: SpdConv,
    pub s3_proj: Conv2d,
    pub s4_proj: ConvBn,
    pub s5_proj: ConvBn,
    pub aifi: Aifi,
    pub lateral5: ConvBn,
    pub fuse45: CspRepFusion,
    pub okfusion: OkFusion,
    pub down8: ConvBn,
    pub fuse16: CspRepFusion,
    pub down16: ConvBn,
    pub fuse32: CspRepFusion,
}

impl Esop {
    /// `in_channels` are the channel counts of S2..S5; `image_size` fixes the
    /// stride-8 resolution the frequency gates are built for.
    pub fn new(pb: &ParamBuilder, config: &NeckConfig, in_channels: [usize; 4], image_size: usize) -> Result<Self> {
        config.validate()?;
        if image_size == 0 || image_size % 32 != 0 {
            return Err(Error::Shape(format!("image size {image_size} is not divisible by 32")));
        }
        let d = config.hidden_dim;
        let side8 = image_size / 8;
        let depth = config.repblock_depth;
        Ok(Self {
            config: config.clone(),
            spd: SpdConv::new(&pb.pp("spd"), in_channels[0], d / 2)?,
            s3_proj: Conv2d::new(&pb.pp("s3_proj"), in_channels[1], d / 2, 1, 1, true)?,
            s4_proj: ConvBn::new(&pb.pp("s4_proj"), in_channels[2], d, 1, 1, Act::None)?,
            s5_proj: ConvBn::new(&pb.pp("s5_proj"), in_channels[3], d, 1, 1, Act::None)?,
            aifi: Aifi::new(&pb.pp("aifi"), d, config.aifi_heads, config.aifi_ffn_dim)?,
            lateral5: ConvBn::new(&pb.pp("lateral5"), d, d, 1, 1, Act::Relu)?,
            fuse45: CspRepFusion::new(&pb.pp("fuse45"), 2 * d, d, depth)?,
            okfusion: OkFusion::new(&pb.pp("okfusion"), d, config.large_kernel, (side8, side8), depth, config.use_cok)?,
            down8: ConvBn::new(&pb.pp("down8"), d, d, 3, 2, Act::Relu)?,
            fuse16: CspRepFusion::new(&pb.pp("fuse16"), 2 * d, d, depth)?,
            down16: ConvBn::new(&pb.pp("down16"), d, d, 3, 2, Act::Relu)?,
            fuse32: CspRepFusion::new(&pb.pp("fuse32"), 2 * d, d, depth)?,
        })
    }

    pub fn forward(&self, p: &PyramidFeatures, mode: Mode) -> Result<NeckOutput> {
        p.validate()?;
        let s23 = Tensor::cat(&[&self.spd.forward(&p.s2.data)?, &self.s3_proj.forward(&p.s3.data)?], 1)?;

        let a = self.aifi.forward(&self.s5_proj.forward(&p.s5.data, mode)?)?;
        let lat5 = self.lateral5.forward(&a.output, mode)?;
        let s4 = self.s4_proj.forward(&p.s4.data, mode)?;
        let s45 = self.fuse45.forward(&Tensor::cat(&[&ops::upsample2x(&lat5)?, &s4], 1)?, mode)?;

        let s2345 = self.okfusion.forward(&s23, &ops::upsample2x(&s45)?, mode)?;

        let n16 = self.fuse16.forward(&Tensor::cat(&[&self.down8.forward(&s2345, mode)?, &s45], 1)?, mode)?;
        let n32 = self.fuse32.forward(&Tensor::cat(&[&self.down16.forward(&n16, mode)?, &lat5], 1)?, mode)?;

        let memory = EncoderMemory::from_levels(&[s2345.clone(), n16, n32])?;
        ops::ensure_finite(&memory.tokens, "encoder memory")?;
        let mut pyramid = p.clone();
        pyramid.s23 = Some(FeatureMap::new(s23, 8)?);
        pyramid.s45 = Some(FeatureMap::new(s45, 16)?);
        pyramid.s2345 = Some(FeatureMap::new(s2345, 8)?);
        Ok(NeckOutput {
            memory,
            pyramid,
            aifi_attention: a.attention,
            s5_hw: p.s5.hw(),
        })
    }
}
