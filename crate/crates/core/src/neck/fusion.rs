//! Fusion blocks of the cross-scale pyramid.

use candle_core::Tensor;

use super::omni::OmniKernel;
use crate::backbone::CspProjections;
use crate::error::{Error, Result};
use crate::nn::{Act, ConvBn, Mode, ParamBuilder};

/// n sequential 3×3 conv-BN-ReLU units (train-time form, no reparameterization).
#[derive(Clone)]
pub struct RepBlock {
    pub units: Vec<ConvBn>,
}

impl RepBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, depth: usize) -> Result<Self> {
        let units = (0..depth)
            .map(|i| ConvBn::new(&pb.pp(format!("unit{i}")), channels, channels, 3, 1, Act::Relu))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { units })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for u in &self.units {
            h = u.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Zeroes the last convolution so the block outputs zeros.
    pub fn zero_output(&self) -> Result<()> {
        match self.units.last() {
            Some(u) => u.conv.set_zero(),
            None => Ok(()),
        }
    }
}

/// Two-branch fusion of a channel concatenation: rep(a(x)) + b(x).
#[derive(Clone)]
pub struct CspRepFusion {
    pub a: ConvBn,
    pub b: ConvBn,
    pub rep: RepBlock,
}

impl CspRepFusion {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBn::new(&pb.pp("a"), c_in, c_out, 1, 1, Act::Relu)?,
            b: ConvBn::new(&pb.pp("b"), c_in, c_out, 1, 1, Act::Relu)?,
            rep: RepBlock::new(&pb.pp("rep"), c_out, depth)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok((self.rep.forward(&self.a.forward(x, mode)?, mode)? + self.b.forward(x, mode)?)?)
    }
}

/// CSP wrapper around an omni-kernel.
#[derive(Clone)]
pub struct CokBlock {
    pub csp: CspProjections,
    pub omni: OmniKernel,
}

impl CokBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, large_kernel: usize, hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            csp: CspProjections::new(pb, channels)?,
            omni: OmniKernel::new(&pb.pp("omni"), channels / 2, large_kernel, hw)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.csp.apply(x, |h| self.omni.forward(h))
    }
}

/// S′ = COK(Concat(S23, S45)); S2345 = Conv(S′) + RepBlock(Conv(S′)).
#[derive(Clone)]
pub struct OkFusion {
    /// `None` is the ablation with the COK block replaced by the identity.
    pub cok: Option<CokBlock>,
    pub conv: ConvBn,
    pub rep: RepBlock,
}

impl OkFusion {
    pub fn new(
        pb: &ParamBuilder,
        dim: usize,
        large_kernel: usize,
        hw: (usize, usize),
        rep_depth: usize,
        use_cok: bool,
    ) -> Result<Self> {
        Ok(Self {
            cok: if use_cok {
                Some(CokBlock::new(&pb.pp("cok"), 2 * dim, large_kernel, hw)?)
            } else {
                None
            },
            conv: ConvBn::new(&pb.pp("conv"), 2 * dim, dim, 1, 1, Act::Relu)?,
            rep: RepBlock::new(&pb.pp("rep"), dim, rep_depth)?,
        })
    }

    /// `s45` must already be upsampled to the spatial size of `s23`.
    pub fn forward(&self, s23: &Tensor, s45: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = s23.dims4()?;
        let (_, _, h2, w2) = s45.dims4()?;
        if (h, w) != (h2, w2) {
            return Err(Error::Shape(format!("OK fusion inputs {h}x{w} and {h2}x{w2} differ")));
        }
        let cat = Tensor::cat(&[s23, s45], 1)?;
        let s_prime = match &self.cok {
            Some(c) => c.forward(&cat)?,
            None => cat,
        };
        let c = self.conv.forward(&s_prime, mode)?;
        Ok((self.rep.forward(&c, mode)? + c)?)
    }
}
