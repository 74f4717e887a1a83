//! Differentiable tensor helpers shared by every model block.

pub mod kernels;

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
pub use kernels::{DeformSample, Depthwise, Im2Col};

/// Dense 2-D convolution on (N, C, H, W) with weight (O, C, kh, kw).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    let out = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let cols = x.reshape((n, c, h * w))?;
        let wm = weight.reshape((o, c))?.broadcast_left(n)?.contiguous()?;
        wm.matmul(&cols)?.reshape((n, o, h, w))?
    } else {
        let op = Im2Col { kh, kw, stride, pad };
        let (ho, wo) = op.out_hw(h, w);
        let cols = x.contiguous()?.apply_op1(op)?;
        let wm = weight.reshape((o, c * kh * kw))?.broadcast_left(n)?.contiguous()?;
        wm.matmul(&cols)?.reshape((n, o, ho, wo))?
    };
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, o, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Depthwise convolution with odd kernel sizes and same padding.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise)?)
}

/// Multi-scale deformable sampling; see [`DeformSample`] for the layout.
pub fn deform_sample(
    value: &Tensor,
    locations: &Tensor,
    weights: &Tensor,
    levels: &[(usize, usize)],
) -> Result<Tensor> {
    let op = DeformSample {
        levels: levels.to_vec(),
    };
    Ok(value
        .contiguous()?
        .apply_op3(&locations.contiguous()?, &weights.contiguous()?, op)?)
}

/// Logistic sigmoid expressed through tanh so it stays differentiable and
/// numerically stable for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Inverse of [`sigmoid`] with the argument clamped to [eps, 1 - eps].
pub fn inverse_sigmoid(x: &Tensor, eps: f64) -> Result<Tensor> {
    let x = x.clamp(eps, 1.0 - eps)?;
    let one_minus = (x.ones_like()? - &x)?;
    Ok((x.log()? - one_minus.log()?)?)
}

/// Softmax over the last dimension. The row max is detached before the
/// shift, which leaves the result and its gradient unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm_last(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Nearest-neighbour ×2 upsampling of (N, C, H, W).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// (N, C, H, W) -> (N, H*W, C) token layout.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// (N, H*W, C) tokens back to (N, C, H, W).
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, hw, c) = t.dims3()?;
    if hw != h * w {
        return Err(Error::Shape(format!("{hw} tokens cannot form a {h}x{w} map")));
    }
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

/// 3×3 mean filter that divides by the number of in-bounds taps, so a
/// constant map is returned unchanged including at the borders.
pub fn box_blur3(x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let kernel = Tensor::ones((c, 1, 3, 3), x.dtype(), x.device())?;
    let summed = depthwise_conv2d(x, &kernel)?;
    let counts = tap_counts(h, w, x.dtype(), x.device())?;
    Ok(summed.broadcast_div(&counts)?)
}

fn tap_counts(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let span = |i: usize, n: usize| -> f64 {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n - 1);
        (hi - lo + 1) as f64
    };
    let counts: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).map(move |j| span(i, h) * span(j, w)))
        .collect();
    Ok(Tensor::from_vec(counts, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Flattened host copy in f64, for assertions and exports.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Largest absolute value, or zero for an empty tensor.
pub fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(to_f64_vec(t)?.into_iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Returns an error naming `what` if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if to_f64_vec(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
