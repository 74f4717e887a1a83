//! Box-conditioned multi-scale deformable cross-attention.

use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::neck::EncoderMemory;
use crate::nn::{Linear, ParamBuilder};
use crate::ops;

/// Sampling geometry of one cross-attention call, detached from the graph.
#[derive(Debug, Clone)]
pub struct CrossTrace {
    /// Reference centres (B, Q, 2).
    pub reference: Tensor,
    /// Clamped sampling points (B, Q, heads, L, M, 2).
    pub locations: Tensor,
    /// Softmax weights over L×M per head (B, Q, heads, L, M).
    pub weights: Tensor,
}

pub struct CrossOutput {
    /// Projected attention output (B, Q, D), before the residual.
    pub output: Tensor,
    pub trace: CrossTrace,
}

#[derive(Clone)]
pub struct DeformableCrossAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value_proj: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableCrossAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, levels: usize, points: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let offsets = Linear::zeros(&pb.pp("offsets"), dim, heads * levels * points * 2)?;
        // each head starts on its own direction, points spread 1..=M along it
        let mut bias = Vec::with_capacity(heads * levels * points * 2);
        for h in 0..heads {
            let theta = h as f64 * 2.0 * PI / heads as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let m = c.abs().max(s.abs());
            for _ in 0..levels {
                for p in 0..points {
                    bias.push(c / m * (p + 1) as f64);
                    bias.push(s / m * (p + 1) as f64);
                }
            }
        }
        let n = bias.len();
        offsets.bias.set(&Tensor::from_vec(bias, n, pb.device())?.to_dtype(pb.dtype())?)?;
        Ok(Self {
            offsets,
            weights: Linear::zeros(&pb.pp("weights"), dim, heads * levels * points)?,
            value_proj: Linear::new(&pb.pp("value_proj"), dim, dim)?,
            out: Linear::new(&pb.pp("out"), dim, dim)?,
            heads,
            levels,
            points,
        })
    }

    /// `query` = O + P (B, Q, D); `boxes` (B, Q, 4) cxcywh, treated as constants.
    pub fn forward(&self, query: &Tensor, boxes: &Tensor, memory: &EncoderMemory) -> Result<CrossOutput> {
        let (b, q, d) = query.dims3()?;
        if memory.level_shapes.len() != self.levels {
            return Err(Error::Shape(format!(
                "cross-attention expects {} levels, memory has {}",
                self.levels,
                memory.level_shapes.len()
            )));
        }
        let (h, l, m) = (self.heads, self.levels, self.points);
        let (_, s, _) = memory.tokens.dims3()?;
        let value = self.value_proj.forward(&memory.tokens)?.reshape((b, s, h, d / h))?;

        let boxes = boxes.detach();
        let centre = boxes.narrow(2, 0, 2)?;
        let wh = boxes.narrow(2, 2, 2)?;
        let raw = self.offsets.forward(query)?.reshape((b, q, h, l, m, 2))?;
        let scale = (wh * (0.5 / m as f64))?.reshape((b, q, 1, 1, 1, 2))?;
        let loc = raw
            .broadcast_mul(&scale)?
            .broadcast_add(&centre.reshape((b, q, 1, 1, 1, 2))?)?;
        let logits = self.weights.forward(query)?.reshape((b, q, h, l * m))?;
        let attn = ops::softmax_last(&logits)?.reshape((b, q, h, l, m))?;

        let sampled = ops::deform_sample(&value, &loc, &attn, &memory.level_shapes)?;
        Ok(CrossOutput {
            output: self.out.forward(&sampled)?,
            trace: CrossTrace {
                reference: centre.contiguous()?,
                locations: loc.detach().clamp(0.0, 1.0)?,
                weights: attn.detach(),
            },
        })
    }

    /// Flattened sampling weights summed per (query, head) for testing.
    pub fn weight_sums(trace: &CrossTrace) -> Result<Vec<f64>> {
        let (b, q, h, l, m) = trace.weights.dims5()?;
        let s = trace.weights.reshape((b, q, h, l * m))?.sum(3)?;
        Ok(s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}
