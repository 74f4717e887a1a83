//! Omni-kernel feature mixer: a local depthwise 1×1 branch, a large-kernel
//! depthwise branch (strip and square kernels), and a global frequency branch
//! made of a dual-domain channel gate followed by a per-bin spectral gate.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::fft::{magnitude, Dft2};
use crate::nn::{Conv2d, DepthwiseConv, Init, Linear, ParamBuilder};
use crate::ops;

/// Dual-domain channel attention: x ⊙ σ(W·[GAP(x), mean|F(x)|/HW] + b).
#[derive(Clone)]
pub struct Dcam {
    pub fc: Linear,
    dft: Dft2,
}

impl Dcam {
    pub fn new(pb: &ParamBuilder, channels: usize, hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(&pb.pp("fc"), 2 * channels, channels)?,
            dft: Dft2::new(hw.0, hw.1, pb.dtype(), pb.device())?,
        })
    }

    /// Channel gate (B, C) in (0, 1).
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let gap = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let (re, im) = self.dft.forward(x)?;
        let spec = (magnitude(&re, &im)?.mean(D::Minus1)?.mean(D::Minus1)? / (h * w) as f64)?;
        ops::sigmoid(&self.fc.forward(&Tensor::cat(&[&gap, &spec], 1)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        Ok(x.broadcast_mul(&self.gate(x)?.reshape((b, c, 1, 1))?)?)
    }
}

/// Frequency space attention: inverse FFT of the spectrum scaled by a learned
/// conjugate-symmetric per-bin gate.
#[derive(Clone)]
pub struct Fsam {
    /// (C, H, W), ones at init.
    pub gate: Var,
    dft: Dft2,
}

impl Fsam {
    pub fn new(pb: &ParamBuilder, channels: usize, hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            gate: pb.param("gate", (channels, hw.0, hw.1), Init::Const(1.0))?,
            dft: Dft2::new(hw.0, hw.1, pb.dtype(), pb.device())?,
        })
    }

    /// (real output, imaginary residue).
    pub fn forward_complex(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.dft.symmetrize(&self.gate)?;
        let (re, im) = self.dft.forward(x)?;
        self.dft.inverse(&re.broadcast_mul(&g)?, &im.broadcast_mul(&g)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_complex(x)?.0)
    }
}

/// The three branch outputs of an omni-kernel, before summation.
pub struct OmniBranches {
    pub local: Tensor,
    pub large: Tensor,
    pub global: Tensor,
}

#[derive(Clone)]
pub struct OmniKernel {
    pub local: DepthwiseConv,
    pub strip_w: DepthwiseConv,
    pub strip_h: DepthwiseConv,
    pub square: DepthwiseConv,
    pub dcam: Dcam,
    pub fsam: Fsam,
    pub out: Conv2d,
    hw: (usize, usize),
}

impl OmniKernel {
    pub fn new(pb: &ParamBuilder, channels: usize, large_kernel: usize, hw: (usize, usize)) -> Result<Self> {
        if large_kernel % 2 == 0 {
            return Err(Error::Config(format!("large kernel must be odd, got {large_kernel}")));
        }
        let k = large_kernel;
        Ok(Self {
            local: DepthwiseConv::new(&pb.pp("local"), channels, 1, 1)?,
            strip_w: DepthwiseConv::new(&pb.pp("strip_w"), channels, 1, k)?,
            strip_h: DepthwiseConv::new(&pb.pp("strip_h"), channels, k, 1)?,
            square: DepthwiseConv::new(&pb.pp("square"), channels, k, k)?,
            dcam: Dcam::new(&pb.pp("dcam"), channels, hw)?,
            fsam: Fsam::new(&pb.pp("fsam"), channels, hw)?,
            out: Conv2d::new(&pb.pp("out"), channels, channels, 1, 1, true)?,
            hw,
        })
    }

    pub fn branches(&self, x: &Tensor) -> Result<OmniBranches> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != self.hw {
            return Err(Error::Shape(format!("omni-kernel built for {:?}, got {h}x{w}", self.hw)));
        }
        let large = ((self.strip_w.forward(x)? + self.strip_h.forward(x)?)? + self.square.forward(x)?)?;
        Ok(OmniBranches {
            local: self.local.forward(x)?,
            large,
            global: self.fsam.forward(&self.dcam.forward(x)?)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.branches(x)?;
        self.out.forward(&(((x + b.local)? + b.large)? + b.global)?)
    }

    /// Zeroes every branch (including the spectral gate) and sets the output
    /// projection to the identity.
    pub fn make_identity(&self) -> Result<()> {
        for dw in [&self.local, &self.strip_w, &self.strip_h, &self.square] {
            dw.set_zero()?;
        }
        self.fsam.gate.set(&self.fsam.gate.zeros_like()?)?;
        self.out.set_identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, projected_sum, random_var};
    use crate::nn::ParamStore;
    use crate::ops::{max_abs, to_f64_vec};
    use candle_core::{DType, Device};
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn dw_naive(x: &[f64], (c, h, w): (usize, usize, usize), k: &[f64], bias: &[f64], (kh, kw): (usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; c * h * w];
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        for ch in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = bias[ch];
                    for a in 0..kh as isize {
                        for b in 0..kw as isize {
                            let (y, xx) = (i + a - ph, j + b - pw);
                            if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                acc += k[(ch * kh + a as usize) * kw + b as usize]
                                    * x[(ch * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[(ch * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
        out
    }

    fn fft2(plane: &[Complex<f64>], h: usize, w: usize, inverse: bool) -> Vec<Complex<f64>> {
        let mut planner = FftPlanner::new();
        let (fw, fh) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        let mut buf = plane.to_vec();
        for row in buf.chunks_mut(w) {
            fw.process(row);
        }
        for col in 0..w {
            let mut tmp: Vec<Complex<f64>> = (0..h).map(|r| buf[r * w + col]).collect();
            fh.process(&mut tmp);
            for r in 0..h {
                buf[r * w + col] = tmp[r];
            }
        }
        buf
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn vals(v: &DepthwiseConv) -> (Vec<f64>, Vec<f64>) {
        (to_f64_vec(&v.weight).unwrap(), to_f64_vec(&v.bias).unwrap())
    }

    #[test]
    fn matches_independent_branch_sum() {
        let (c, h, w, k) = (3usize, 5usize, 6usize, 7usize);
        let store = ParamStore::new(DType::F64, 8);
        let ok = OmniKernel::new(&store.root(), c, k, (h, w)).unwrap();
        for dw in [&ok.local, &ok.strip_w, &ok.strip_h, &ok.square] {
            let b = random_var(c, 40).unwrap();
            dw.bias.set(b.as_tensor()).unwrap();
        }
        ok.fsam.gate.set(random_var((c, h, w), 41).unwrap().as_tensor()).unwrap();
        let x = random_var((1, c, h, w), 9).unwrap();
        let xs = to_f64_vec(&x).unwrap();
        let got = to_f64_vec(&ok.forward(&x).unwrap()).unwrap();

        let dims = (c, h, w);
        let (lw, lb) = vals(&ok.local);
        let local = dw_naive(&xs, dims, &lw, &lb, (1, 1));
        let mut large = vec![0.0; c * h * w];
        for (dw, kk) in [(&ok.strip_w, (1, k)), (&ok.strip_h, (k, 1)), (&ok.square, (k, k))] {
            let (kw_, kb) = vals(dw);
            for (acc, v) in large.iter_mut().zip(dw_naive(&xs, dims, &kw_, &kb, kk)) {
                *acc += v;
            }
        }

        // DCAM with rustfft magnitudes
        let fc_w = to_f64_vec(&ok.dcam.fc.weight).unwrap();
        let fc_b = to_f64_vec(&ok.dcam.fc.bias).unwrap();
        let hw = h * w;
        let mut stats = vec![0.0; 2 * c];
        for ch in 0..c {
            let plane = &xs[ch * hw..(ch + 1) * hw];
            stats[ch] = plane.iter().sum::<f64>() / hw as f64;
            let spec = fft2(&plane.iter().map(|&v| Complex::new(v, 0.0)).collect::<Vec<_>>(), h, w, false);
            stats[c + ch] = spec.iter().map(|z| z.norm()).sum::<f64>() / hw as f64 / hw as f64;
        }
        let gate: Vec<f64> = (0..c)
            .map(|o| sigmoid(fc_b[o] + (0..2 * c).map(|i| fc_w[o * 2 * c + i] * stats[i]).sum::<f64>()))
            .collect();

        // FSAM with the symmetrized gate
        let g = to_f64_vec(&ok.fsam.gate).unwrap();
        let mut global = vec![0.0; c * hw];
        for ch in 0..c {
            let plane: Vec<Complex<f64>> = xs[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&v| Complex::new(v * gate[ch], 0.0))
                .collect();
            let mut spec = fft2(&plane, h, w, false);
            for u in 0..h {
                for v in 0..w {
                    let conj = ((h - u) % h) * w + (w - v) % w;
                    let gs = 0.5 * (g[ch * hw + u * w + v] + g[ch * hw + conj]);
                    spec[u * w + v] *= gs;
                }
            }
            let back = fft2(&spec, h, w, true);
            for p in 0..hw {
                global[ch * hw + p] = back[p].re / hw as f64;
            }
        }

        let ow = to_f64_vec(&ok.out.weight).unwrap();
        let ob = to_f64_vec(ok.out.bias.as_ref().unwrap()).unwrap();
        let sum: Vec<f64> = (0..c * hw).map(|i| xs[i] + local[i] + large[i] + global[i]).collect();
        let mut want = vec![0.0; c * hw];
        for o in 0..c {
            for p in 0..hw {
                want[o * hw + p] = ob[o] + (0..c).map(|i| ow[o * c + i] * sum[i * hw + p]).sum::<f64>();
            }
        }
        let diff = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn zero_branches_with_identity_output_pass_input_through() {
        let store = ParamStore::new(DType::F64, 2);
        let ok = OmniKernel::new(&store.root(), 4, 31, (8, 8)).unwrap();
        ok.make_identity().unwrap();
        let x = random_var((2, 4, 8, 8), 1).unwrap();
        assert_eq!(to_f64_vec(&ok.forward(&x).unwrap()).unwrap(), to_f64_vec(&x).unwrap());
    }

    #[test]
    fn large_kernel_keeps_shape_on_small_maps() {
        let store = ParamStore::new(DType::F32, 2);
        let ok = OmniKernel::new(&store.root(), 16, 31, (8, 8)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 16, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(ok.forward(&x).unwrap().dims(), &[1, 16, 8, 8]);
        assert!(matches!(OmniKernel::new(&store.root().pp("e"), 4, 6, (8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn saturated_dcam_is_identity_and_unit_fsam_round_trips() {
        let store = ParamStore::new(DType::F64, 3);
        let pb = store.root();
        let dcam = Dcam::new(&pb.pp("d"), 4, (4, 5)).unwrap();
        dcam.fc.weight.set(&dcam.fc.weight.zeros_like().unwrap()).unwrap();
        dcam.fc.bias.set(&(dcam.fc.bias.ones_like().unwrap() * 40.0).unwrap()).unwrap();
        let x = random_var((2, 4, 4, 5), 4).unwrap();
        let y = dcam.forward(&x).unwrap();
        assert!(max_abs(&(y - x.as_tensor()).unwrap()).unwrap() < 1e-4);

        let fsam = Fsam::new(&pb.pp("f"), 4, (4, 5)).unwrap();
        let (re, im) = fsam.forward_complex(&x).unwrap();
        assert!(max_abs(&(re - x.as_tensor()).unwrap()).unwrap() < 1e-6);
        assert!(max_abs(&im).unwrap() < 1e-6);
        fsam.gate.set(random_var((4, 4, 5), 5).unwrap().as_tensor()).unwrap();
        let (_, im) = fsam.forward_complex(&x).unwrap();
        assert!(max_abs(&im).unwrap() < 1e-6);
    }

    #[test]
    fn omni_kernel_gradient_check() {
        let store = ParamStore::new(DType::F64, 6);
        let ok = OmniKernel::new(&store.root(), 4, 5, (4, 4)).unwrap();
        ok.fsam.gate.set(random_var((4, 4, 4), 7).unwrap().as_tensor()).unwrap();
        let x = random_var((2, 4, 4, 4), 8).unwrap();
        let vars = [x.clone(), ok.square.weight.clone(), ok.fsam.gate.clone(), ok.dcam.fc.weight.clone()];
        let r = check(&vars, 1e-4, 48, || projected_sum(&ok.forward(&x)?, 4)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
