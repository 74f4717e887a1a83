//! Hand-written CPU kernels with analytic backward passes.
//!
//! Three hot paths get dedicated kernels: im2col for dense convolutions (the
//! matmul itself goes through candle), stride-1 depthwise convolution with
//! same padding, and multi-scale deformable bilinear sampling. Every kernel is
//! generic over the float type so the same code runs the f32 training path and
//! the f64 gradient checks.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("kernel expects a contiguous input"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

macro_rules! float_dispatch {
    ($dtype:expr, $fn:ident, $($arg:expr),*) => {
        match $dtype {
            DType::F32 => $fn::<f32>($($arg),*),
            DType::F64 => $fn::<f64>($($arg),*),
            other => bail!("unsupported dtype {other:?}"),
        }
    };
}

// ---------------------------------------------------------------------------
// im2col

/// Unfolds (N, C, H, W) into (N, C*kh*kw, Ho*Wo) columns.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2Col {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn unfold<T: WithDType>(&self, src: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (n, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let rows = c * self.kh * self.kw;
        let mut dst = vec![T::zero(); n * rows * ho * wo];
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..][..h * w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (ch * self.kh + ki) * self.kw + kj;
                        let out = &mut dst[(b * rows + row) * ho * wo..][..ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &plane[iy as usize * w..][..w];
                            let orow = &mut out[oy * wo..][..wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o = irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }

    fn fold<T: WithDType>(&self, cols: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (n, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let rows = c * self.kh * self.kw;
        let mut dst = vec![T::zero(); n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let plane = &mut dst[(b * c + ch) * h * w..][..h * w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (ch * self.kh + ki) * self.kw + kj;
                        let col = &cols[(b * rows + row) * ho * wo..][..ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let crow = &col[oy * wo..][..wo];
                            let prow = &mut plane[iy as usize * w..][..w];
                            for (ox, &v) in crow.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    prow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            bail!("im2col: kernel larger than padded input");
        }
        let (ho, wo) = self.out_hw(h, w);
        let shape = Shape::from((n, c * self.kh * self.kw, ho * wo));
        fn run<T: WithDType>(
            op: &Im2Col,
            s: &CpuStorage,
            l: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> candle_core::Result<CpuStorage> {
            let src = contiguous(T::cpu_storage_as_slice(s)?, l)?;
            Ok(T::to_cpu_storage_owned(op.unfold(src, dims)))
        }
        let out = float_dispatch!(storage.dtype(), run, self, storage, layout, (n, c, h, w))?;
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        fn run<T: WithDType>(
            op: &Im2Col,
            g: &Tensor,
            dims: (usize, usize, usize, usize),
        ) -> candle_core::Result<Tensor> {
            let cols = host::<T>(g)?;
            Tensor::from_vec(op.fold(&cols, dims), dims, g.device())
        }
        Ok(Some(float_dispatch!(grad_res.dtype(), run, self, grad_res, dims)?))
    }
}

// ---------------------------------------------------------------------------
// depthwise convolution, stride 1, same padding

/// Per-channel convolution of (N, C, H, W) with a (C, 1, kh, kw) kernel.
/// Kernel sizes must be odd; padding is kh/2, kw/2 so spatial size is kept.
#[derive(Debug, Clone, Copy, Default)]
pub struct Depthwise;

struct DwGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl DwGeom {
    /// Visits every kernel tap with the valid output row/col ranges for it.
    /// `f(tap_index, dy, dx, rows, cols)`.
    fn taps(&self, mut f: impl FnMut(usize, isize, isize, std::ops::Range<usize>, std::ops::Range<usize>)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let (h, w) = (self.h as isize, self.w as isize);
        for a in 0..self.kh {
            let dy = a as isize - ph;
            let rows = (0isize.max(-dy) as usize)..(h.min(h - dy).max(0) as usize);
            if rows.is_empty() {
                continue;
            }
            for b in 0..self.kw {
                let dx = b as isize - pw;
                let cols = (0isize.max(-dx) as usize)..(w.min(w - dx).max(0) as usize);
                if cols.is_empty() {
                    continue;
                }
                f(a * self.kw + b, dy, dx, rows.clone(), cols);
            }
        }
    }

    fn forward<T: WithDType>(&self, x: &[T], k: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = vec![T::zero(); self.n * self.c * hw];
        for b in 0..self.n {
            for ch in 0..self.c {
                let xs = &x[(b * self.c + ch) * hw..][..hw];
                let ks = &k[ch * self.kh * self.kw..][..self.kh * self.kw];
                let os = &mut out[(b * self.c + ch) * hw..][..hw];
                self.taps(|t, dy, dx, rows, cols| {
                    let wt = ks[t];
                    let (c0, len) = (cols.start, cols.len());
                    let s0 = (c0 as isize + dx) as usize;
                    for i in rows {
                        let src = ((i as isize + dy) as usize) * self.w;
                        let orow = &mut os[i * self.w + c0..][..len];
                        let xrow = &xs[src + s0..][..len];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o += wt * xv;
                        }
                    }
                });
            }
        }
        out
    }

    fn backward<T: WithDType>(&self, x: &[T], k: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let hw = self.h * self.w;
        let kk = self.kh * self.kw;
        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); k.len()];
        for b in 0..self.n {
            for ch in 0..self.c {
                let xs = &x[(b * self.c + ch) * hw..][..hw];
                let gs = &g[(b * self.c + ch) * hw..][..hw];
                let ks = &k[ch * kk..][..kk];
                let gxs = &mut gx[(b * self.c + ch) * hw..][..hw];
                let gks = &mut gk[ch * kk..][..kk];
                self.taps(|t, dy, dx, rows, cols| {
                    let wt = ks[t];
                    let mut acc = T::zero();
                    let (c0, len) = (cols.start, cols.len());
                    let s0 = (c0 as isize + dx) as usize;
                    for i in rows {
                        let src = ((i as isize + dy) as usize) * self.w + s0;
                        let grow = &gs[i * self.w + c0..][..len];
                        acc += dot(grow, &xs[src..][..len]);
                        for (gxv, &gv) in gxs[src..][..len].iter_mut().zip(grow) {
                            *gxv += wt * gv;
                        }
                    }
                    gks[t] += acc;
                });
            }
        }
        (gx, gk)
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

impl Depthwise {
    fn geom(x: &Shape, k: &Shape) -> candle_core::Result<DwGeom> {
        let (n, c, h, w) = x.dims4()?;
        let (kc, one, kh, kw) = k.dims4()?;
        if kc != c || one != 1 {
            bail!("depthwise: kernel shape {k:?} does not match input {x:?}");
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            bail!("depthwise: kernel sizes must be odd, got {kh}x{kw}");
        }
        Ok(DwGeom { n, c, h, w, kh, kw })
    }
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let geom = Self::geom(l1.shape(), l2.shape())?;
        fn run<T: WithDType>(
            g: &DwGeom,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> candle_core::Result<CpuStorage> {
            let x = contiguous(T::cpu_storage_as_slice(s1)?, l1)?;
            let k = contiguous(T::cpu_storage_as_slice(s2)?, l2)?;
            Ok(T::to_cpu_storage_owned(g.forward(x, k)))
        }
        let out = float_dispatch!(s1.dtype(), run, &geom, s1, l1, s2, l2)?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let geom = Self::geom(x.shape(), k.shape())?;
        fn run<T: WithDType>(
            geom: &DwGeom,
            x: &Tensor,
            k: &Tensor,
            g: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor)> {
            let (gx, gk) = geom.backward(&host::<T>(x)?, &host::<T>(k)?, &host::<T>(g)?);
            Ok((
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gk, k.shape(), k.device())?,
            ))
        }
        let (gx, gk) = float_dispatch!(x.dtype(), run, &geom, x, k, grad)?;
        Ok((Some(gx), Some(gk)))
    }
}

// ---------------------------------------------------------------------------
// multi-scale deformable sampling

/// Bilinear multi-scale sampling with attention weights.
///
/// Inputs: value (B, S, heads, dh) where S = Σ HᵢWᵢ over levels laid out by
/// `levels`; locations (B, Q, heads, L, P, 2) as normalized (x, y); weights
/// (B, Q, heads, L, P). Output (B, Q, heads*dh).
///
/// Pixel coordinates follow the half-pixel convention: normalized x maps to
/// `x*W - 0.5`, so the centre of cell i is at (i + 0.5)/W. Reads outside the
/// map contribute zero. Locations are clamped to [0, 1] and receive no
/// gradient where the clamp is active.
#[derive(Debug, Clone)]
pub struct DeformSample {
    pub levels: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
struct Corner {
    index: usize,
    weight: f64,
    dwx: f64,
    dwy: f64,
}

struct SampleGeom<'a> {
    levels: &'a [(usize, usize)],
    starts: Vec<usize>,
    b: usize,
    s: usize,
    q: usize,
    heads: usize,
    dh: usize,
    points: usize,
}

impl<'a> SampleGeom<'a> {
    fn new(op: &'a DeformSample, v: &Shape, loc: &Shape, attn: &Shape) -> candle_core::Result<Self> {
        let (b, s, heads, dh) = v.dims4()?;
        let ld = loc.dims();
        let ad = attn.dims();
        let nl = op.levels.len();
        if ld.len() != 6 || ad.len() != 5 {
            bail!("deform-sample: expected rank-6 locations and rank-5 weights, got {loc:?} / {attn:?}");
        }
        if ld[0] != b || ld[2] != heads || ld[3] != nl || ld[5] != 2 || ad[..5] != ld[..5] {
            bail!("deform-sample: inconsistent shapes value {v:?} loc {loc:?} attn {attn:?}");
        }
        let total: usize = op.levels.iter().map(|(h, w)| h * w).sum();
        if total != s {
            bail!("deform-sample: value has {s} tokens but levels cover {total}");
        }
        let mut starts = Vec::with_capacity(nl);
        let mut acc = 0;
        for (h, w) in &op.levels {
            starts.push(acc);
            acc += h * w;
        }
        Ok(Self {
            levels: &op.levels,
            starts,
            b,
            s,
            q: ld[1],
            heads,
            dh,
            points: ld[4],
        })
    }

    /// Bilinear corners of a clamped location; `clamped` flags are per axis.
    fn corners(&self, level: usize, lx: f64, ly: f64) -> ([Option<Corner>; 4], bool, bool) {
        let (h, w) = self.levels[level];
        let cx = !(0.0..=1.0).contains(&lx);
        let cy = !(0.0..=1.0).contains(&ly);
        let x = lx.clamp(0.0, 1.0) * w as f64 - 0.5;
        let y = ly.clamp(0.0, 1.0) * h as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let start = self.starts[level];
        let mut out = [None; 4];
        let taps = [
            (0, 0, (1.0 - fy) * (1.0 - fx), -(1.0 - fy), -(1.0 - fx)),
            (0, 1, (1.0 - fy) * fx, 1.0 - fy, -fx),
            (1, 0, fy * (1.0 - fx), -fy, 1.0 - fx),
            (1, 1, fy * fx, fy, fx),
        ];
        for (slot, (oy, ox, wgt, dwx, dwy)) in taps.into_iter().enumerate() {
            let yy = y0 + oy;
            let xx = x0 + ox;
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                out[slot] = Some(Corner {
                    index: start + yy as usize * w + xx as usize,
                    weight: wgt,
                    dwx: dwx * w as f64,
                    dwy: dwy * h as f64,
                });
            }
        }
        (out, cx, cy)
    }

    fn forward<T: WithDType>(&self, v: &[T], loc: &[T], attn: &[T]) -> Vec<T> {
        let nl = self.levels.len();
        let mut out = vec![T::zero(); self.b * self.q * self.heads * self.dh];
        for b in 0..self.b {
            for q in 0..self.q {
                for h in 0..self.heads {
                    let o = &mut out[((b * self.q + q) * self.heads + h) * self.dh..][..self.dh];
                    for l in 0..nl {
                        for p in 0..self.points {
                            let ai = (((b * self.q + q) * self.heads + h) * nl + l) * self.points + p;
                            let a = attn[ai].to_f64();
                            let (corners, _, _) = self.corners(l, loc[2 * ai].to_f64(), loc[2 * ai + 1].to_f64());
                            for c in corners.iter().flatten() {
                                let coef = T::from_f64(a * c.weight);
                                let vrow = &v[((b * self.s + c.index) * self.heads + h) * self.dh..][..self.dh];
                                for (od, &vd) in o.iter_mut().zip(vrow) {
                                    *od += coef * vd;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: WithDType>(&self, v: &[T], loc: &[T], attn: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let nl = self.levels.len();
        let mut gv = vec![T::zero(); v.len()];
        let mut gl = vec![T::zero(); loc.len()];
        let mut ga = vec![T::zero(); attn.len()];
        for b in 0..self.b {
            for q in 0..self.q {
                for h in 0..self.heads {
                    let go = &g[((b * self.q + q) * self.heads + h) * self.dh..][..self.dh];
                    for l in 0..nl {
                        for p in 0..self.points {
                            let ai = (((b * self.q + q) * self.heads + h) * nl + l) * self.points + p;
                            let a = attn[ai].to_f64();
                            let (corners, cx, cy) = self.corners(l, loc[2 * ai].to_f64(), loc[2 * ai + 1].to_f64());
                            let (mut d_attn, mut d_x, mut d_y) = (0.0, 0.0, 0.0);
                            for c in corners.iter().flatten() {
                                let base = ((b * self.s + c.index) * self.heads + h) * self.dh;
                                let vrow = &v[base..][..self.dh];
                                let dot: f64 = vrow.iter().zip(go).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum();
                                d_attn += c.weight * dot;
                                d_x += c.dwx * dot;
                                d_y += c.dwy * dot;
                                let coef = T::from_f64(a * c.weight);
                                for (gd, &od) in gv[base..][..self.dh].iter_mut().zip(go) {
                                    *gd += coef * od;
                                }
                            }
                            ga[ai] = T::from_f64(d_attn);
                            if !cx {
                                gl[2 * ai] = T::from_f64(a * d_x);
                            }
                            if !cy {
                                gl[2 * ai + 1] = T::from_f64(a * d_y);
                            }
                        }
                    }
                }
            }
        }
        (gv, gl, ga)
    }
}

impl CustomOp3 for DeformSample {
    fn name(&self) -> &'static str {
        "deform-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let geom = SampleGeom::new(self, l1.shape(), l2.shape(), l3.shape())?;
        let shape = Shape::from((geom.b, geom.q, geom.heads * geom.dh));
        #[allow(clippy::too_many_arguments)]
        fn run<T: WithDType>(
            g: &SampleGeom,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> candle_core::Result<CpuStorage> {
            let v = contiguous(T::cpu_storage_as_slice(s1)?, l1)?;
            let loc = contiguous(T::cpu_storage_as_slice(s2)?, l2)?;
            let a = contiguous(T::cpu_storage_as_slice(s3)?, l3)?;
            Ok(T::to_cpu_storage_owned(g.forward(v, loc, a)))
        }
        let out = float_dispatch!(s1.dtype(), run, &geom, s1, l1, s2, l2, s3, l3)?;
        Ok((out, shape))
    }

    fn bwd(
        &self,
        v: &Tensor,
        loc: &Tensor,
        attn: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let geom = SampleGeom::new(self, v.shape(), loc.shape(), attn.shape())?;
        fn run<T: WithDType>(
            geom: &SampleGeom,
            v: &Tensor,
            loc: &Tensor,
            attn: &Tensor,
            g: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
            let (gv, gl, ga) = geom.backward(&host::<T>(v)?, &host::<T>(loc)?, &host::<T>(attn)?, &host::<T>(g)?);
            Ok((
                Tensor::from_vec(gv, v.shape(), v.device())?,
                Tensor::from_vec(gl, loc.shape(), loc.device())?,
                Tensor::from_vec(ga, attn.shape(), attn.device())?,
            ))
        }
        let (gv, gl, ga) = float_dispatch!(v.dtype(), run, &geom, v, loc, attn, grad)?;
        Ok((Some(gv), Some(gl), Some(ga)))
    }
}
