//! Two-dimensional discrete Fourier transforms written as real matrix
//! products, so the frequency-domain blocks stay differentiable end to end.
//!
//! Complex values are carried as (real, imaginary) tensor pairs. For the
//! small spatial sizes of deep feature maps the dense DFT is cheap and exact
//! up to rounding.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Precomputed cosine/sine matrices for an H×W transform.
#[derive(Clone)]
pub struct Dft2 {
    h: usize,
    w: usize,
    cos_h: Tensor,
    sin_h: Tensor,
    cos_w: Tensor,
    sin_w: Tensor,
}

fn trig(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            // reduce jk mod n first so large products keep full precision
            let a = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    Ok((
        Tensor::from_vec(c, (n, n), device)?.to_dtype(dtype)?,
        Tensor::from_vec(s, (n, n), device)?.to_dtype(dtype)?,
    ))
}

impl Dft2 {
    pub fn new(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("DFT of an empty map".into()));
        }
        let (cos_h, sin_h) = trig(h, dtype, device)?;
        let (cos_w, sin_w) = trig(w, dtype, device)?;
        Ok(Self {
            h,
            w,
            cos_h,
            sin_h,
            cos_w,
            sin_w,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        if d.len() < 2 || d[d.len() - 2] != self.h || d[d.len() - 1] != self.w {
            return Err(Error::Shape(format!(
                "DFT built for {}x{}, got {:?}",
                self.h, self.w, d
            )));
        }
        Ok(())
    }

    /// x · M along the last axis.
    fn right(x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let w = dims[dims.len() - 1];
        let rows = x.elem_count() / w;
        Ok(x.contiguous()?.reshape((rows, w))?.matmul(m)?.reshape(dims)?)
    }

    /// M · x along the second-to-last axis (M is symmetric).
    fn left(x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let r = x.dims().len();
        let t = x.transpose(r - 2, r - 1)?;
        Ok(Self::right(&t, m)?.transpose(r - 2, r - 1)?.contiguous()?)
    }

    /// Forward transform of a real map: returns (Re X, Im X).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        let t1 = Self::right(x, &self.cos_w)?;
        let t2 = Self::right(x, &self.sin_w)?;
        let re = (Self::left(&t1, &self.cos_h)? - Self::left(&t2, &self.sin_h)?)?;
        let im = (Self::left(&t1, &self.sin_h)? + Self::left(&t2, &self.cos_h)?)?.neg()?;
        Ok((re, im))
    }

    /// Full complex inverse transform: returns (Re x, Im x).
    pub fn inverse(&self, re: &Tensor, im: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(re)?;
        self.check(im)?;
        let norm = 1.0 / (self.h * self.w) as f64;
        let zr = (Self::left(re, &self.cos_h)? - Self::left(im, &self.sin_h)?)?;
        let zi = (Self::left(re, &self.sin_h)? + Self::left(im, &self.cos_h)?)?;
        let out_re = ((Self::right(&zr, &self.cos_w)? - Self::right(&zi, &self.sin_w)?)? * norm)?;
        let out_im = ((Self::right(&zr, &self.sin_w)? + Self::right(&zi, &self.cos_w)?)? * norm)?;
        Ok((out_re, out_im))
    }

    /// Flat index permutation mapping frequency (u, v) to (-u, -v) mod (H, W).
    pub fn conjugate_index(&self, device: &Device) -> Result<Tensor> {
        let idx: Vec<u32> = (0..self.h)
            .flat_map(|u| {
                (0..self.w).map(move |v| (((self.h - u) % self.h) * self.w + (self.w - v) % self.w) as u32)
            })
            .collect();
        Ok(Tensor::from_vec(idx, self.h * self.w, device)?)
    }

    /// Makes a real per-frequency gate (…, H, W) conjugate-symmetric so that
    /// gating the spectrum of a real signal keeps the inverse real.
    pub fn symmetrize(&self, gate: &Tensor) -> Result<Tensor> {
        self.check(gate)?;
        let dims = gate.dims().to_vec();
        let lead = gate.elem_count() / (self.h * self.w);
        let flat = gate.contiguous()?.reshape((lead, self.h * self.w))?;
        let mirrored = flat.index_select(&self.conjugate_index(gate.device())?, 1)?;
        Ok(((flat + mirrored)? * 0.5)?.reshape(dims)?)
    }
}

/// |z| with a small floor inside the square root so the gradient exists at 0.
pub fn magnitude(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    Ok(((re.sqr()? + im.sqr()?)? + 1e-12)?.sqrt()?)
}
