//! Space-to-depth: a lossless 2× downsample that moves each 2×2 cell into
//! four channel groups.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// (n, c, h, w) -> (n, 4c, h/2, w/2). Channel groups are ordered
/// [even-row/even-col, even/odd, odd/even, odd/odd], c channels each.
pub fn spd_rearrange(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("space-to-depth needs even spatial dims, got {h}x{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    Ok(x.reshape((n, c, hh, 2, hw, 2))?
        .permute((0, 3, 5, 1, 2, 4))?
        .contiguous()?
        .reshape((n, 4 * c, hh, hw))?)
}

/// Inverse of [`spd_rearrange`].
pub fn spd_inverse(x: &Tensor) -> Result<Tensor> {
    let (n, c4, hh, hw) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("depth-to-space needs a multiple of 4 channels, got {c4}")));
    }
    let c = c4 / 4;
    Ok(x.reshape((n, 2, 2, c, hh, hw))?
        .permute((0, 3, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((n, c, 2 * hh, 2 * hw))?)
}

/// Space-to-depth followed by a 1×1 convolution.
#[derive(Clone)]
pub struct SpdConv {
    pub conv: Conv2d,
}

impl SpdConv {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), 4 * c_in, c_out, 1, 1, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&spd_rearrange(x)?)
    }
}
