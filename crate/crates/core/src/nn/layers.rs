use candle_core::{Tensor, Var, D};

use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};
use crate::ops;

/// Whether normalization layers use batch statistics and update running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", (out_dim, in_dim), Init::FanIn(in_dim))?,
            bias: pb.param("bias", out_dim, Init::FanIn(in_dim))?,
            in_dim,
            out_dim,
        })
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", (out_dim, in_dim), Init::Zeros)?,
            bias: pb.param("bias", out_dim, Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {last}",
                self.in_dim
            )));
        }
        let rows = x.elem_count() / last;
        let flat = x.reshape((rows, last))?;
        let y = flat.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&pb.pp(format!("layers.{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", dim, Init::Const(1.0))?,
            beta: pb.param("bias", dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_last(x, &self.gamma, &self.beta, 1e-5)
    }

    /// Normalizes a (N, C, H, W) map over channels at every pixel.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = ops::to_tokens(x)?;
        ops::from_tokens(&self.forward(&t)?, h, w)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let fan_in = c_in * k * k;
        Ok(Self {
            weight: pb.param("weight", (c_out, c_in, k, k), Init::FanIn(fan_in))?,
            bias: if bias {
                Some(pb.param("bias", c_out, Init::FanIn(fan_in))?)
            } else {
                None
            },
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_deref(), self.stride, self.pad)
    }

    /// Sets the weight to the identity map (square 1×1 kernels only) and zeroes the bias.
    pub fn set_identity(&self) -> Result<()> {
        let (o, c, kh, kw) = self.weight.dims4()?;
        if o != c || kh != 1 || kw != 1 {
            return Err(Error::Contract("identity needs a square 1x1 convolution".into()));
        }
        let eye = Tensor::eye(o, self.weight.dtype(), self.weight.device())?.reshape((o, c, 1, 1))?;
        self.weight.set(&eye)?;
        if let Some(b) = &self.bias {
            b.set(&b.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn set_zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        if let Some(b) = &self.bias {
            b.set(&b.zeros_like()?)?;
        }
        Ok(())
    }
}

/// Depthwise convolution with same padding; kernels may be rectangular.
#[derive(Clone)]
pub struct DepthwiseConv {
    pub weight: Var,
    pub bias: Var,
}

impl DepthwiseConv {
    pub fn new(pb: &ParamBuilder, channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", (channels, 1, kh, kw), Init::FanIn(kh * kw))?,
            bias: pb.param("bias", channels, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = ops::depthwise_conv2d(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn set_zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", channels, Init::Const(1.0))?,
            beta: pb.param("bias", channels, Init::Zeros)?,
            running_mean: pb.buffer("running_mean", channels, 0.0)?,
            running_var: pb.buffer("running_var", channels, 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
            }
            Mode::Eval => (
                self.running_mean.reshape((1, c, 1, 1))?,
                self.running_var.reshape((1, c, 1, 1))?,
            ),
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
}

/// Convolution (no bias) + batch norm + optional ReLU.
#[derive(Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBn {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize, act: Act) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), c_in, c_out, k, stride, false)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), c_out)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(match self.act {
            Act::None => y,
            Act::Relu => y.relu()?,
        })
    }
}
