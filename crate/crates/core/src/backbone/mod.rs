//! High-frequency enhanced semantics backbone.
//!
//! A ResNet-18-shaped network at configurable width: a two-convolution stem to
//! stride 4, then four stages. Shallow stages stack CSP-wrapped residual pairs;
//! the stages listed in `fca_stages` stack CSP-wrapped FCA blocks instead.

pub mod csp;
pub mod fca;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use csp::{csp_split_merge, CspProjections};
pub use fca::{Dffn, FcaBlock, Sfa};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, PyramidFeatures};
use crate::nn::{Act, ConvBn, Mode, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// 1-based stage indices that use CSP-FCA blocks.
    pub fca_stages: Vec<usize>,
    pub attention_heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1],
            fca_stages: vec![3, 4],
            attention_heads: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for &c in self.stage_channels.iter().chain([&self.stem_channels]) {
            if c == 0 || c % 2 != 0 {
                return Err(Error::Config(format!("channel counts must be even and positive, got {c}")));
            }
        }
        for &s in &self.fca_stages {
            if !(1..=4).contains(&s) {
                return Err(Error::Config(format!("fca stage {s} outside 1..=4")));
            }
            let inner = self.stage_channels[s - 1] / 2;
            if self.attention_heads == 0 || inner % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {inner} FCA channels not divisible by {} heads",
                    self.attention_heads
                )));
            }
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }
}

/// Two 3×3 conv-BN residual units, y = x + BN(conv(ReLU(BN(conv x)))).
#[derive(Clone)]
pub struct ResidualPair {
    pub units: Vec<(ConvBn, ConvBn)>,
}

impl ResidualPair {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let units = (0..2)
            .map(|i| {
                let u = pb.pp(format!("unit{i}"));
                Ok((
                    ConvBn::new(&u.pp("a"), channels, channels, 3, 1, Act::Relu)?,
                    ConvBn::new(&u.pp("b"), channels, channels, 3, 1, Act::None)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { units })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (a, b) in &self.units {
            h = (b.forward(&a.forward(&h, mode)?, mode)? + &h)?;
        }
        Ok(h)
    }

    pub fn zero_output_projections(&self) -> Result<()> {
        for (_, b) in &self.units {
            b.conv.set_zero()?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum BlockInner {
    Residual(ResidualPair),
    Fca(FcaBlock),
}

/// CSP-BasicBlock or CSP-FCA depending on the inner transform.
#[derive(Clone)]
pub struct CspBlock {
    pub csp: CspProjections,
    pub inner: BlockInner,
}

impl CspBlock {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.csp.apply(x, |h| match &self.inner {
            BlockInner::Residual(r) => r.forward(h, mode),
            BlockInner::Fca(f) => f.forward(h),
        })
    }

    /// Makes the whole block the identity map.
    pub fn make_identity(&self) -> Result<()> {
        self.csp.set_identity()?;
        match &self.inner {
            BlockInner::Residual(r) => r.zero_output_projections(),
            BlockInner::Fca(f) => f.zero_output_projections(),
        }
    }
}

#[derive(Clone)]
pub struct Stage {
    pub downsample: Option<ConvBn>,
    pub blocks: Vec<CspBlock>,
}

#[derive(Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub image_size: usize,
    pub stem: [ConvBn; 2],
    pub stages: Vec<Stage>,
}

impl Backbone {
    /// Builds the backbone for square inputs of `image_size` pixels (the FCA
    /// frequency gates are sized to the stage resolution).
    pub fn new(pb: &ParamBuilder, config: &BackboneConfig, image_size: usize) -> Result<Self> {
        config.validate()?;
        if image_size == 0 || image_size % 32 != 0 {
            return Err(Error::Shape(format!("image size {image_size} is not divisible by 32")));
        }
        let c = config.stage_channels;
        let stem = [
            ConvBn::new(&pb.pp("stem.0"), 3, config.stem_channels, 3, 2, Act::Relu)?,
            ConvBn::new(&pb.pp("stem.1"), config.stem_channels, c[0], 3, 2, Act::Relu)?,
        ];
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let spb = pb.pp(format!("stage{}", s + 1));
            let side = image_size >> (s + 2);
            let downsample = if s == 0 {
                None
            } else {
                Some(ConvBn::new(&spb.pp("down"), c[s - 1], c[s], 3, 2, Act::Relu)?)
            };
            let use_fca = config.fca_stages.contains(&(s + 1));
            let blocks = (0..config.blocks_per_stage[s])
                .map(|b| {
                    let bpb = spb.pp(format!("block{b}"));
                    let inner = if use_fca {
                        BlockInner::Fca(FcaBlock::new(&bpb.pp("fca"), c[s] / 2, config.attention_heads, (side, side))?)
                    } else {
                        BlockInner::Residual(ResidualPair::new(&bpb.pp("basic"), c[s] / 2)?)
                    };
                    Ok(CspBlock {
                        csp: CspProjections::new(&bpb, c[s])?,
                        inner,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
        }
        Ok(Self {
            config: config.clone(),
            image_size,
            stem,
            stages,
        })
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<PyramidFeatures> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {ch}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by 32")));
        }
        if h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "backbone built for {0}x{0} inputs, got {h}x{w}",
                self.image_size
            )));
        }
        let mut x = self.stem[1].forward(&self.stem[0].forward(image, mode)?, mode)?;
        let mut outs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(d) = &stage.downsample {
                x = d.forward(&x, mode)?;
            }
            for b in &stage.blocks {
                x = b.forward(&x, mode)?;
            }
            let fm = FeatureMap::new(x.clone(), 4 << s)?;
            fm.ensure_finite(&format!("backbone stage {}", s + 1))?;
            outs.push(fm);
        }
        let s5 = outs.pop().unwrap();
        let s4 = outs.pop().unwrap();
        let s3 = outs.pop().unwrap();
        let s2 = outs.pop().unwrap();
        PyramidFeatures::new(s2, s3, s4, s5)
    }
}
