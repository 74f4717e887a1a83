//! Geometry-aware positional queries.
//!
//! Each reference box coordinate gets a D/2-dim sinusoidal encoding; the four
//! encodings are concatenated (2D dims), reduced by an MLP to D dims, and
//! scaled elementwise by a second MLP of the content query.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamBuilder};

pub const PE_TEMPERATURE: f64 = 10000.0;

/// Interleaved sin/cos encoding of one scalar: slot 2i is sin(2πv/T^(2i/dim)),
/// slot 2i+1 the matching cosine.
pub fn sinusoidal_pe(v: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Config(format!("sinusoidal encoding needs an even dim, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let a = 2.0 * PI * v / PE_TEMPERATURE.powf(2.0 * i as f64 / dim as f64);
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Cat(PE(x), PE(y), PE(w), PE(h)) with D/2 dims each: 2D dims in total.
pub fn gape_box_encoding(b: [f64; 4], d: usize) -> Result<Vec<f64>> {
    if d % 4 != 0 {
        return Err(Error::Config(format!("box encoding needs D divisible by 4, got {d}")));
    }
    let mut out = Vec::with_capacity(2 * d);
    for v in b {
        out.extend(sinusoidal_pe(v, d / 2)?);
    }
    Ok(out)
}

/// Box encodings for a (B, Q, 4) tensor of boxes, as (B, Q, 2D). Boxes are
/// treated as constants.
pub fn box_encoding_tensor(boxes: &Tensor, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let (b, q, four) = boxes.dims3()?;
    if four != 4 {
        return Err(Error::Shape(format!("boxes need 4 coordinates, got {four}")));
    }
    let flat = boxes.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut data = Vec::with_capacity(b * q * 2 * d);
    for c in flat.chunks(4) {
        data.extend(gape_box_encoding([c[0], c[1], c[2], c[3]], d)?);
    }
    Ok(Tensor::from_vec(data, (b, q, 2 * d), device)?.to_dtype(dtype)?)
}

/// P = MLP_scale(O) ⊙ MLP_pos(PE(B)).
#[derive(Clone)]
pub struct Gape {
    /// 2D → D (ReLU) → D.
    pub pos_mlp: Mlp,
    /// D → D (ReLU) → D.
    pub scale_mlp: Mlp,
    /// When false every positional query is zero (content-only ablation).
    pub enabled: bool,
    dim: usize,
}

impl Gape {
    pub fn new(pb: &ParamBuilder, dim: usize, enabled: bool) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::Config(format!("GAPE needs D divisible by 4, got {dim}")));
        }
        Ok(Self {
            pos_mlp: Mlp::new(&pb.pp("pos_mlp"), &[2 * dim, dim, dim])?,
            scale_mlp: Mlp::new(&pb.pp("scale_mlp"), &[dim, dim, dim])?,
            enabled,
            dim,
        })
    }

    /// Positional queries (B, Q, D) from content (B, Q, D) and boxes (B, Q, 4).
    pub fn positional_query(&self, content: &Tensor, boxes: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(content.zeros_like()?);
        }
        let pe = box_encoding_tensor(boxes, self.dim, content.dtype(), content.device())?;
        self.from_encoding(content, &pe)
    }

    /// Same as [`Gape::positional_query`] with a precomputed (B, Q, 2D) encoding.
    pub fn from_encoding(&self, content: &Tensor, pe: &Tensor) -> Result<Tensor> {
        Ok((self.scale_mlp.forward(content)? * self.pos_mlp.forward(pe)?)?)
    }
}
