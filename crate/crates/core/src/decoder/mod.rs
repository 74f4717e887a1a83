//! Transformer decoder with geometry-aware positional queries.
//!
//! Each stage runs self-attention (positional terms on queries and keys
//! only), deformable cross-attention into the encoder memory, a feed-forward
//! block, and class/box heads. Boxes are refined in logit space and detached
//! before they are handed to the next stage.

pub mod cross;
pub mod gape;
pub mod select;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use cross::{CrossOutput, CrossTrace, DeformableCrossAttention};
pub use gape::{box_encoding_tensor, gape_box_encoding, sinusoidal_pe, Gape};
pub use select::{anchor_logits, prior_logit, top_k_indices, QuerySelector, Selection};

use crate::error::{Error, Result};
use crate::neck::EncoderMemory;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_stages: usize,
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub sampling_points: usize,
    pub num_levels: usize,
    pub num_classes: usize,
    pub ffn_dim: usize,
    /// false gives the content-only ablation (all positional queries zero).
    #[serde(default = "yes")]
    pub gape: bool,
}

fn yes() -> bool {
    true
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            num_queries: 100,
            hidden_dim: 64,
            heads: 4,
            sampling_points: 4,
            num_levels: 3,
            num_classes: 3,
            ffn_dim: 256,
            gape: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim;
        if d == 0 || d % 8 != 0 {
            return Err(Error::Config(format!("decoder dim {d} must be a positive multiple of 8")));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {d} not divisible by {} heads", self.heads)));
        }
        if self.num_stages == 0 || self.num_queries == 0 || self.num_classes == 0 || self.sampling_points == 0 {
            return Err(Error::Config("decoder stage, query, class and point counts must be positive".into()));
        }
        if self.num_levels != 3 {
            return Err(Error::Config(format!("decoder reads 3 memory levels, got {}", self.num_levels)));
        }
        Ok(())
    }
}

/// Content queries (B, Q, D) and reference boxes (B, Q, 4) in normalized cxcywh.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub content: Tensor,
    pub boxes: Tensor,
}

impl QueryState {
    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.content.dim(1)?)
    }

    /// Concatenates query sets along the query axis.
    pub fn concat(states: &[&QueryState]) -> Result<QueryState> {
        let c: Vec<&Tensor> = states.iter().map(|s| &s.content).collect();
        let b: Vec<&Tensor> = states.iter().map(|s| &s.boxes).collect();
        Ok(QueryState {
            content: Tensor::cat(&c, 1)?,
            boxes: Tensor::cat(&b, 1)?,
        })
    }

    /// Queries `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<QueryState> {
        Ok(QueryState {
            content: self.content.narrow(1, start, len)?,
            boxes: self.boxes.narrow(1, start, len)?,
        })
    }
}

/// Additive mask (1, 1, Q, Q) that blocks attention across query groups.
pub fn group_mask(sizes: &[usize], dtype: DType, device: &Device) -> Result<Option<Tensor>> {
    if sizes.len() <= 1 {
        return Ok(None);
    }
    let q: usize = sizes.iter().sum();
    let mut group = Vec::with_capacity(q);
    for (g, &n) in sizes.iter().enumerate() {
        group.extend(std::iter::repeat(g).take(n));
    }
    let data: Vec<f64> = (0..q)
        .flat_map(|i| {
            let gi = group[i];
            group.iter().map(move |&gj| if gi == gj { 0.0 } else { -1e9 })
        })
        .collect();
    Ok(Some(Tensor::from_vec(data, (1, 1, q, q), device)?.to_dtype(dtype)?))
}

pub struct StageOutput {
    /// Input state of the next stage (boxes detached).
    pub next: QueryState,
    pub logits: Tensor,
    /// Refined boxes with gradients into the box head.
    pub boxes: Tensor,
    /// Self-attention weights (B, heads, Q, Q).
    pub self_attention: Tensor,
    pub trace: CrossTrace,
}

#[derive(Clone)]
pub struct DecoderStage {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross: DeformableCrossAttention,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: LayerNorm,
    pub class_head: Linear,
    pub box_head: Mlp,
}

impl DecoderStage {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        let class_head = Linear::new(&pb.pp("class_head"), d, cfg.num_classes)?;
        class_head.bias.set(&(class_head.bias.ones_like()? * prior_logit(0.01))?)?;
        let box_head = Mlp::new(&pb.pp("box_head"), &[d, d, d, 4])?;
        let stage = Self {
            self_attn: MultiHeadAttention::new(&pb.pp("self_attn"), d, cfg.heads)?,
            norm1: LayerNorm::new(&pb.pp("norm1"), d)?,
            cross: DeformableCrossAttention::new(&pb.pp("cross"), d, cfg.heads, cfg.num_levels, cfg.sampling_points)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), d)?,
            ffn1: Linear::new(&pb.pp("ffn1"), d, cfg.ffn_dim)?,
            ffn2: Linear::new(&pb.pp("ffn2"), cfg.ffn_dim, d)?,
            norm3: LayerNorm::new(&pb.pp("norm3"), d)?,
            class_head,
            box_head,
        };
        stage.zero_box_deltas()?;
        Ok(stage)
    }

    pub fn zero_box_deltas(&self) -> Result<()> {
        let last = self.box_head.last();
        last.weight.set(&last.weight.zeros_like()?)?;
        last.bias.set(&last.bias.zeros_like()?)?;
        Ok(())
    }

    /// Self-attention with Q = K = O + P and V = O, then residual and norm.
    pub fn self_attention(&self, content: &Tensor, pos: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let qk = (content + pos)?;
        let a = self.self_attn.forward(&qk, &qk, content, mask)?;
        Ok((self.norm1.forward(&(content + a.output)?)?, a.weights))
    }

    pub fn forward(&self, q: &QueryState, memory: &EncoderMemory, gape: &Gape, mask: Option<&Tensor>) -> Result<StageOutput> {
        let boxes = q.boxes.detach();
        let pos = gape.positional_query(&q.content, &boxes)?;
        let (o, self_attention) = self.self_attention(&q.content, &pos, mask)?;

        let pos = gape.positional_query(&o, &boxes)?;
        let cross = self.cross.forward(&(&o + pos)?, &boxes, memory)?;
        let o = self.norm2.forward(&(o + cross.output)?)?;

        let f = self.ffn2.forward(&self.ffn1.forward(&o)?.relu()?)?;
        let o = self.norm3.forward(&(o + f)?)?;

        let logits = self.class_head.forward(&o)?;
        let delta = self.box_head.forward(&o)?;
        let refined = ops::sigmoid(&(delta + ops::inverse_sigmoid(&boxes, 1e-5)?)?)?;
        Ok(StageOutput {
            next: QueryState {
                content: o,
                boxes: refined.detach(),
            },
            logits,
            boxes: refined,
            self_attention,
            trace: cross.trace,
        })
    }
}

#[derive(Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub selector: QuerySelector,
    pub gape: Gape,
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            selector: QuerySelector::new(&pb.pp("select"), config.hidden_dim, config.num_classes, config.num_queries)?,
            gape: Gape::new(&pb.pp("gape"), config.hidden_dim, config.gape)?,
            stages: (0..config.num_stages)
                .map(|j| DecoderStage::new(&pb.pp(format!("stage{}", j + 1)), config))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Runs stage `j` (1-based) on one or more concatenated query groups.
    pub fn run_stage(&self, j: usize, q: &QueryState, memory: &EncoderMemory, group_sizes: &[usize]) -> Result<StageOutput> {
        let stage = self
            .stages
            .get(j.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("decoder has no stage {j}")))?;
        let total: usize = group_sizes.iter().sum();
        if total != q.num_queries()? {
            return Err(Error::Shape(format!(
                "group sizes cover {total} queries, state holds {}",
                q.num_queries()?
            )));
        }
        let mask = group_mask(group_sizes, q.content.dtype(), q.content.device())?;
        stage.forward(q, memory, &self.gape, mask.as_ref())
    }
}
