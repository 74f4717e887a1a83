use candle_core::Tensor;

use super::layers::Linear;
use super::params::ParamBuilder;
use crate::error::{Error, Result};
use crate::ops;

/// Standard multi-head scaled dot-product attention.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
    dim: usize,
}

/// Attention output together with the row-stochastic weights (B, heads, Tq, Tk).
pub struct Attended {
    pub output: Tensor,
    pub weights: Tensor,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&pb.pp("q"), dim, dim)?,
            k: Linear::new(&pb.pp("k"), dim, dim)?,
            v: Linear::new(&pb.pp("v"), dim, dim)?,
            out: Linear::new(&pb.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Attention logits (B, heads, Tq, Tk) before masking and softmax.
    pub fn logits(&self, query: &Tensor, key: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(query)?, self.heads)?;
        let k = split_heads(&self.k.forward(key)?, self.heads)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        Ok((q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?)
    }

    /// Runs attention; `mask` is an additive bias broadcastable to (B, heads, Tq, Tk).
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, mask: Option<&Tensor>) -> Result<Attended> {
        let mixed = scaled_dot_attention(
            &self.q.forward(query)?,
            &self.k.forward(key)?,
            &self.v.forward(value)?,
            self.heads,
            mask,
        )?;
        Ok(Attended {
            output: self.out.forward(&mixed.output)?,
            weights: mixed.weights,
        })
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head attention over already projected q (B, Tq, D), k and v (B, Tk, D).
/// Returns the head-concatenated mixture (B, Tq, D) and the weights.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Attended> {
    let (b, tq, d) = q.dims3()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} is not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let mut logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    if let Some(m) = mask {
        logits = logits.broadcast_add(m)?;
    }
    let weights = ops::softmax_last(&logits)?;
    let output = weights.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, tq, d))?;
    Ok(Attended { output, weights })
}
