//! Frequency-aware cascade attention: spatial-frequency attention (SFA)
//! followed by a dual-frequency feed-forward network (DFFN), each wrapped in
//! a pre-norm residual.
//!
//! SFA combines three projections:
//! - spatial: multi-head self-attention over the flattened pixels,
//! - frequency: a learned per-bin gate applied to the 2-D spectrum of the
//!   spatial branch (the frequency-spatial fusion),
//! - channel: a squeeze-excite gate computed from the block input that
//!   re-weights the frequency-refined features (the frequency-channel fusion).
//!
//! The two fusions are mixed by learned scalars before the output projection.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::fft::Dft2;
use crate::nn::{scaled_dot_attention, Conv2d, DepthwiseConv, Init, LayerNorm, Linear, ParamBuilder};
use crate::ops;

pub struct SfaOutput {
    pub output: Tensor,
    /// Row-stochastic spatial attention (B, heads, HW, HW).
    pub attention: Tensor,
}

#[derive(Clone)]
pub struct Sfa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Per-channel, per-frequency gate (C, H, W); symmetrized before use.
    pub freq_gate: Var,
    pub se_reduce: Linear,
    pub se_expand: Linear,
    /// Scalar weights of the frequency-spatial and frequency-channel fusions.
    pub fuse_spatial: Var,
    pub fuse_channel: Var,
    pub proj: Linear,
    dft: Dft2,
    heads: usize,
}

impl Sfa {
    pub fn new(pb: &ParamBuilder, channels: usize, heads: usize, hw: (usize, usize)) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "SFA: {channels} channels not divisible by {heads} heads"
            )));
        }
        if hw.0 < 2 || hw.1 < 2 {
            return Err(Error::Shape(format!("SFA needs spatial dims >= 2, got {hw:?}")));
        }
        let squeeze = (channels / 4).max(1);
        Ok(Self {
            q: Linear::new(&pb.pp("q"), channels, channels)?,
            k: Linear::new(&pb.pp("k"), channels, channels)?,
            v: Linear::new(&pb.pp("v"), channels, channels)?,
            freq_gate: pb.param("freq_gate", (channels, hw.0, hw.1), Init::Const(1.0))?,
            se_reduce: Linear::new(&pb.pp("se_reduce"), channels, squeeze)?,
            se_expand: Linear::new(&pb.pp("se_expand"), squeeze, channels)?,
            fuse_spatial: pb.param("fuse_spatial", 1, Init::Const(1.0))?,
            fuse_channel: pb.param("fuse_channel", 1, Init::Const(1.0))?,
            proj: Linear::new(&pb.pp("proj"), channels, channels)?,
            dft: Dft2::new(hw.0, hw.1, pb.dtype(), pb.device())?,
            heads,
        })
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        self.dft.size()
    }

    /// Gated spectrum round trip of a (B, C, H, W) map: (real, imaginary residue).
    pub fn frequency_branch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let gate = self.dft.symmetrize(&self.freq_gate)?;
        let (re, im) = self.dft.forward(x)?;
        self.dft.inverse(&re.broadcast_mul(&gate)?, &im.broadcast_mul(&gate)?)
    }

    /// Squeeze-excite channel gate (B, C) from the block input.
    pub fn channel_gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        ops::sigmoid(&self.se_expand.forward(&self.se_reduce.forward(&pooled)?.relu()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<SfaOutput> {
        let (b, c, h, w) = x.dims4()?;
        if (h, w) != self.dft.size() {
            return Err(Error::Shape(format!(
                "SFA built for {:?}, got {h}x{w}",
                self.dft.size()
            )));
        }
        let tokens = ops::to_tokens(x)?;
        let att = scaled_dot_attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(&tokens)?,
            &self.v.forward(&tokens)?,
            self.heads,
            None,
        )?;
        let spatial = ops::from_tokens(&att.output, h, w)?;
        let (freq, _) = self.frequency_branch(&spatial)?;
        let gate = self.channel_gate(x)?.reshape((b, c, 1, 1))?;
        let fsf = freq.broadcast_mul(&self.fuse_spatial)?;
        let fcf = freq.broadcast_mul(&gate)?.broadcast_mul(&self.fuse_channel)?;
        let fused = ops::to_tokens(&(fsf + fcf)?)?;
        Ok(SfaOutput {
            output: ops::from_tokens(&self.proj.forward(&fused)?, h, w)?,
            attention: att.weights,
        })
    }
}

/// Dual-frequency feed-forward: a pointwise expansion, a complementary
/// low/high split (3×3 mean blur and its residual), a depthwise conv with a
/// pointwise sigmoid gate on the high band, and a pointwise merge.
#[derive(Clone)]
pub struct Dffn {
    pub expand: Conv2d,
    pub high_dw: DepthwiseConv,
    pub high_gate: Conv2d,
    pub merge: Conv2d,
}

impl Dffn {
    pub fn new(pb: &ParamBuilder, channels: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            expand: Conv2d::new(&pb.pp("expand"), channels, hidden, 1, 1, true)?,
            high_dw: DepthwiseConv::new(&pb.pp("high_dw"), hidden, 3, 3)?,
            high_gate: Conv2d::new(&pb.pp("high_gate"), hidden, hidden, 1, 1, true)?,
            merge: Conv2d::new(&pb.pp("merge"), hidden, channels, 1, 1, true)?,
        })
    }

    /// Complementary (low, high) decomposition: low + high == x.
    pub fn split(x: &Tensor) -> Result<(Tensor, Tensor)> {
        let low = ops::box_blur3(x)?;
        let high = (x - &low)?;
        Ok((low, high))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("DFFN needs spatial dims >= 2, got {h}x{w}")));
        }
        let u = self.expand.forward(x)?.gelu()?;
        let (low, high) = Self::split(&u)?;
        let enhanced = (self.high_dw.forward(&high)? * ops::sigmoid(&self.high_gate.forward(&high)?)?)?;
        self.merge.forward(&(low + enhanced)?)
    }
}

/// X_sfa = SFA(LN(X)) + X; X_out = DFFN(LN(X_sfa)) + X_sfa.
#[derive(Clone)]
pub struct FcaBlock {
    pub norm1: LayerNorm,
    pub sfa: Sfa,
    pub norm2: LayerNorm,
    pub dffn: Dffn,
}

impl FcaBlock {
    pub fn new(pb: &ParamBuilder, channels: usize, heads: usize, hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), channels)?,
            sfa: Sfa::new(&pb.pp("sfa"), channels, heads, hw)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), channels)?,
            dffn: Dffn::new(&pb.pp("dffn"), channels, 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x)?.0)
    }

    pub fn forward_with_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let sfa = self.sfa.forward(&self.norm1.forward_channels(x)?)?;
        let x_sfa = (sfa.output + x)?;
        let out = (self.dffn.forward(&self.norm2.forward_channels(&x_sfa)?)? + &x_sfa)?;
        Ok((out, sfa.attention))
    }

    /// Zeroes both final projections so the block is the identity map.
    pub fn zero_output_projections(&self) -> Result<()> {
        let p = &self.sfa.proj;
        p.weight.set(&p.weight.zeros_like()?)?;
        p.bias.set(&p.bias.zeros_like()?)?;
        self.dffn.merge.set_zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, projected_sum, random_var};
    use crate::nn::ParamStore;
    use crate::ops::{max_abs, to_f64_vec};
    use candle_core::DType;

    #[test]
    fn zeroed_projections_make_fca_the_identity() {
        let store = ParamStore::new(DType::F64, 3);
        let block = FcaBlock::new(&store.root(), 8, 2, (4, 4)).unwrap();
        block.zero_output_projections().unwrap();
        let x = random_var((2, 8, 4, 4), 1).unwrap();
        let y = block.forward(&x).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), to_f64_vec(&x).unwrap());
    }

    #[test]
    fn fca_preserves_shape() {
        let store = ParamStore::new(DType::F32, 3);
        let block = FcaBlock::new(&store.root(), 32, 4, (8, 8)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 32, 8, 8), &candle_core::Device::Cpu).unwrap();
        assert_eq!(block.forward(&x).unwrap().dims(), &[2, 32, 8, 8]);
    }

    #[test]
    fn head_count_must_divide_channels() {
        let store = ParamStore::new(DType::F32, 3);
        assert!(matches!(
            FcaBlock::new(&store.root(), 10, 4, (4, 4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_attention_degenerates_to_mean_pooled_values() {
        let store = ParamStore::new(DType::F64, 5);
        let sfa = Sfa::new(&store.root(), 6, 1, (4, 4)).unwrap();
        // q = 0 makes every logit 0, hence uniform attention
        sfa.q.weight.set(&sfa.q.weight.zeros_like().unwrap()).unwrap();
        sfa.q.bias.set(&sfa.q.bias.zeros_like().unwrap()).unwrap();
        sfa.fuse_channel.set(&sfa.fuse_channel.zeros_like().unwrap()).unwrap();
        let x = random_var((1, 6, 4, 4), 2).unwrap();
        let got = sfa.forward(&x).unwrap().output;

        let tokens = ops::to_tokens(&x).unwrap();
        let v = sfa.v.forward(&tokens).unwrap();
        let mean = v.mean_keepdim(1).unwrap().broadcast_as((1, 16, 6)).unwrap();
        let want = ops::from_tokens(&sfa.proj.forward(&mean).unwrap(), 4, 4).unwrap();
        assert!(max_abs(&(got - want).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn frequency_round_trip_is_real_and_attention_is_stochastic() {
        let store = ParamStore::new(DType::F64, 6);
        let sfa = Sfa::new(&store.root(), 16, 4, (8, 8)).unwrap();
        let g = random_var((16, 8, 8), 8).unwrap();
        sfa.freq_gate.set(&g).unwrap();
        let x = random_var((1, 16, 8, 8), 7).unwrap();
        let (_, imag) = sfa.frequency_branch(&x).unwrap();
        assert!(max_abs(&imag).unwrap() < 1e-6);
        let att = sfa.forward(&x).unwrap().attention;
        for s in to_f64_vec(&att.sum(D::Minus1).unwrap()).unwrap() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dffn_split_is_complementary_and_dc_has_no_high_band() {
        let x = random_var((1, 3, 5, 5), 9).unwrap();
        let (low, high) = Dffn::split(&x).unwrap();
        assert!(max_abs(&((low + high).unwrap() - x.as_tensor()).unwrap()).unwrap() < 1e-12);
        let c = (Tensor::ones((1, 3, 5, 5), DType::F64, &candle_core::Device::Cpu).unwrap() * 0.7).unwrap();
        let (_, high) = Dffn::split(&c).unwrap();
        assert!(max_abs(&high).unwrap() < 1e-12);
    }

    #[test]
    fn fca_and_dffn_pass_gradient_checks() {
        let store = ParamStore::new(DType::F64, 11);
        let block = FcaBlock::new(&store.root(), 8, 2, (4, 4)).unwrap();
        let x = random_var((1, 8, 4, 4), 12).unwrap();
        let r = check(&[x.clone()], 1e-4, 128, || projected_sum(&block.forward(&x)?, 1)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let params: Vec<Var> = vec![
            block.sfa.freq_gate.clone(),
            block.sfa.q.weight.clone(),
            block.sfa.fuse_channel.clone(),
            block.dffn.high_dw.weight.clone(),
        ];
        let r = check(&params, 1e-4, 24, || projected_sum(&block.forward(&x)?, 1)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
