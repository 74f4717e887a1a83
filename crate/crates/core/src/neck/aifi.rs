//! Single pre-norm transformer encoder layer over the deepest feature map.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use crate::ops;

/// Fixed 2-D sine-cosine position table (1, H*W, dim) for a row-major grid.
/// Each quarter of the channels holds sin(x·ω), cos(x·ω), sin(y·ω), cos(y·ω)
/// with ω_i = T^(-i/(dim/4)).
pub fn sincos_2d(h: usize, w: usize, dim: usize, temperature: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!("2-D position table needs dim divisible by 4, got {dim}")));
    }
    let q = dim / 4;
    let omega: Vec<f64> = (0..q).map(|i| temperature.powf(-(i as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for f in [f64::sin, f64::cos] {
                data.extend(omega.iter().map(|o| f(x as f64 * o)));
            }
            for f in [f64::sin, f64::cos] {
                data.extend(omega.iter().map(|o| f(y as f64 * o)));
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, h * w, dim), device)?.to_dtype(dtype)?)
}

pub struct AifiOutput {
    pub output: Tensor,
    /// (B, heads, HW, HW), rows sum to one.
    pub attention: Tensor,
}

#[derive(Clone)]
pub struct Aifi {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    dim: usize,
}

impl Aifi {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::Config(format!("AIFI width {dim} must be divisible by 4")));
        }
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            ffn1: Linear::new(&pb.pp("ffn1"), dim, ffn_dim)?,
            ffn2: Linear::new(&pb.pp("ffn2"), ffn_dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<AifiOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Config(format!("AIFI expects {} channels, got {c}", self.dim)));
        }
        let pos = sincos_2d(h, w, c, 10000.0, x.dtype(), x.device())?;
        let t = ops::to_tokens(x)?;
        let n = self.norm1.forward(&t)?;
        let qk = n.broadcast_add(&pos)?;
        let att = self.attn.forward(&qk, &qk, &n, None)?;
        let t = (t + att.output)?;
        let f = self.ffn2.forward(&self.ffn1.forward(&self.norm2.forward(&t)?)?.gelu()?)?;
        let t = (t + f)?;
        Ok(AifiOutput {
            output: ops::from_tokens(&t, h, w)?,
            attention: att.weights,
        })
    }

    pub fn zero_output_projections(&self) -> Result<()> {
        for l in [&self.attn.out, &self.ffn2] {
            l.weight.set(&l.weight.zeros_like()?)?;
            l.bias.set(&l.bias.zeros_like()?)?;
        }
        Ok(())
    }
}
