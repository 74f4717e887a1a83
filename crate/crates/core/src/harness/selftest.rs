//! Fast invariant suite run by the `selftest` command.

use std::time::Instant;

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::fca::FcaBlock;
use crate::backbone::fca::Sfa;
use crate::boxes::ImageTargets;
use crate::decoder::cross::DeformableCrossAttention;
use crate::error::{Error, Result};
use crate::gradcheck::random_var;
use crate::model::{Detector, ModelConfig};
use crate::neck::aifi::Aifi;
use crate::neck::omni::OmniKernel;
use crate::neck::spd::{spd_inverse, spd_rearrange};
use crate::nn::ParamStore;
use crate::ops::{max_abs, to_f64_vec};
use crate::sqr::matching::assignment_cost;
use crate::sqr::{hungarian, inference_forward, sqr_training_step, LossConfig, SqrVariant};

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Test hook: swap two channel groups in the depth-to-space inverse so
    /// the bijection check must fail.
    pub corrupt_spd_inverse: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type Check = fn(&SelftestOptions) -> Result<String>;

fn fail(msg: String) -> Result<String> {
    Err(Error::Contract(msg))
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<InvariantResult> {
    let checks: [(&'static str, Check); 8] = [
        ("shapes", shapes),
        ("spd_bijection", spd_bijection),
        ("fft_realness", fft_realness),
        ("softmax_rows", softmax_rows),
        ("box_range", box_range),
        ("residual_identity", residual_identity),
        ("matcher_vs_bruteforce", matcher_vs_bruteforce),
        ("sqr_group_counts", sqr_group_counts),
    ];
    checks
        .iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f(opts);
            InvariantResult {
                name,
                passed: r.is_ok(),
                detail: match r {
                    Ok(s) => s,
                    Err(e) => e.to_string(),
                },
                millis: t.elapsed().as_millis(),
            }
        })
        .collect()
}

fn tiny_model() -> Result<(Detector, Tensor)> {
    let model = Detector::new(&ModelConfig::tiny(), 11, DType::F64)?;
    let images = random_var((2, 3, 64, 64), 12)?.as_tensor().clone();
    Ok((model, images))
}

fn shapes(_: &SelftestOptions) -> Result<String> {
    let (model, images) = tiny_model()?;
    let out = inference_forward(&model, &images)?;
    let c = &model.config;
    let s = c.image_size;
    let tokens = (s / 8).pow(2) + (s / 16).pow(2) + (s / 32).pow(2);
    let (b, n, d) = out.memory.tokens.dims3()?;
    if (b, n, d) != (2, tokens, c.neck.hidden_dim) {
        return fail(format!("memory tokens {:?}, expected (2, {tokens}, {})", (b, n, d), c.neck.hidden_dim));
    }
    for st in &out.stages {
        let want = [2, c.decoder.num_queries, c.decoder.num_classes];
        if st.logits.dims() != want || st.boxes.dims() != [2, c.decoder.num_queries, 4] {
            return fail(format!("stage {} logits {:?}", st.stage, st.logits.dims()));
        }
    }
    if out.s5_hw != (s / 32, s / 32) {
        return fail(format!("S5 grid {:?}", out.s5_hw));
    }
    Ok(format!("{tokens} memory tokens, {} stages", out.stages.len()))
}

fn spd_bijection(opts: &SelftestOptions) -> Result<String> {
    let x = random_var((2, 3, 8, 6), 21)?.as_tensor().clone();
    let y = spd_rearrange(&x)?;
    let mut back = spd_inverse(&y)?;
    if opts.corrupt_spd_inverse {
        let c = y.dim(1)? / 4;
        let g: Vec<Tensor> = (0..4).map(|i| y.narrow(1, i * c, c)).collect::<candle_core::Result<_>>()?;
        back = spd_inverse(&Tensor::cat(&[&g[1], &g[0], &g[2], &g[3]], 1)?)?;
    }
    let (a, b) = (to_f64_vec(&back)?, to_f64_vec(&x)?);
    if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
        return fail("depth-to-space does not invert space-to-depth bitwise".into());
    }
    let z = random_var((2, 12, 4, 3), 22)?.as_tensor().clone();
    if to_f64_vec(&spd_rearrange(&spd_inverse(&z)?)?)? != to_f64_vec(&z)? {
        return fail("space-to-depth does not invert depth-to-space".into());
    }
    Ok(format!("{} values round-trip bitwise", b.len()))
}

fn fft_realness(_: &SelftestOptions) -> Result<String> {
    let store = ParamStore::new(DType::F64, 31);
    let sfa = Sfa::new(&store.root(), 8, 2, (4, 6))?;
    let x = random_var((2, 8, 4, 6), 32)?.as_tensor().clone();
    let (_, imag) = sfa.frequency_branch(&x)?;
    let m = max_abs(&imag)?;
    if m >= 1e-6 {
        return fail(format!("imaginary residue {m:e}"));
    }
    Ok(format!("max |imag| = {m:.1e}"))
}

fn rows_sum_to_one(t: &Tensor, what: &str) -> Result<f64> {
    let s = to_f64_vec(&t.sum(D::Minus1)?)?;
    let worst = s.iter().fold(0f64, |m, v| m.max((v - 1.0).abs()));
    if worst >= 1e-6 {
        return Err(Error::Contract(format!("{what} rows deviate from 1 by {worst:e}")));
    }
    Ok(worst)
}

fn softmax_rows(_: &SelftestOptions) -> Result<String> {
    let (model, images) = tiny_model()?;
    let out = inference_forward(&model, &images)?;
    let mut worst = rows_sum_to_one(&out.aifi_attention, "encoder attention")?;
    for (j, a) in out.self_attention.iter().enumerate() {
        worst = worst.max(rows_sum_to_one(a, &format!("stage {} self-attention", j + 1))?);
    }
    for (j, t) in out.traces.as_deref().unwrap_or_default().iter().enumerate() {
        let sums = DeformableCrossAttention::weight_sums(t)?;
        let w = sums.iter().fold(0f64, |m, v| m.max((v - 1.0).abs()));
        if w >= 1e-6 {
            return fail(format!("stage {} sampling weights deviate by {w:e}", j + 1));
        }
        worst = worst.max(w);
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn box_range(_: &SelftestOptions) -> Result<String> {
    let (model, images) = tiny_model()?;
    let out = inference_forward(&model, &images)?;
    let mut n = 0;
    for st in std::iter::once(&out.encoder).chain(&out.stages) {
        let v = to_f64_vec(&st.boxes)?;
        if let Some(b) = v.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return fail(format!("stage {} box coordinate {b}", st.stage));
        }
        n += v.len();
    }
    Ok(format!("{n} coordinates in [0,1]"))
}

fn residual_identity(_: &SelftestOptions) -> Result<String> {
    let store = ParamStore::new(DType::F64, 41);
    let pb = store.root();
    let x = random_var((2, 8, 4, 4), 42)?.as_tensor().clone();
    let same = |y: &Tensor, what: &str| -> Result<()> {
        if to_f64_vec(y)? != to_f64_vec(&x)? {
            return Err(Error::Contract(format!("{what} is not the identity with zeroed output")));
        }
        Ok(())
    };
    let fca = FcaBlock::new(&pb.pp("fca"), 8, 2, (4, 4))?;
    fca.zero_output_projections()?;
    same(&fca.forward(&x)?, "frequency-channel block")?;
    let aifi = Aifi::new(&pb.pp("aifi"), 8, 2, 16)?;
    aifi.zero_output_projections()?;
    same(&aifi.forward(&x)?.output, "encoder layer")?;
    let ok = OmniKernel::new(&pb.pp("ok"), 8, 7, (4, 4))?;
    ok.make_identity()?;
    same(&ok.forward(&x)?, "omni-kernel")?;
    Ok("3 blocks pass input through".into())
}

fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(r: usize, used: &mut Vec<bool>, cost: &[f64], rows: usize, cols: usize, need: usize) -> f64 {
        if need == 0 {
            return 0.0;
        }
        if rows - r < need {
            return f64::INFINITY;
        }
        let mut best = go(r + 1, used, cost, rows, cols, need);
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(r + 1, used, cost, rows, cols, need - 1));
                used[c] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; cols], cost, rows, cols, rows.min(cols))
}

fn matcher_vs_bruteforce(_: &SelftestOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for case in 0..200 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // dyadic costs keep every partial sum exact
        let cost: Vec<f64> = (0..r * c).map(|_| rng.random_range(0..64) as f64 / 8.0).collect();
        let m = hungarian(&cost, r, c)?;
        m.validate(r, c)?;
        let got = assignment_cost(&cost, c, &m);
        let want = brute_force(&cost, r, c);
        if got != want || m.pairs.len() != r.min(c) {
            return fail(format!("case {case} ({r}x{c}): matcher {got}, optimum {want}"));
        }
    }
    Ok("200 instances optimal".into())
}

fn sqr_group_counts(_: &SelftestOptions) -> Result<String> {
    let (model, images) = tiny_model()?;
    let targets = vec![
        ImageTargets { boxes: vec![[0.3, 0.3, 0.1, 0.1]], labels: vec![0] },
        ImageTargets { boxes: vec![[0.6, 0.5, 0.2, 0.1]], labels: vec![2] },
    ];
    let cfg = LossConfig::default();
    for v in SqrVariant::ALL {
        let out = sqr_training_step(&model, &images, &targets, v, 1.0, &cfg)?;
        let at = |j: usize| -> Vec<String> {
            out.breakdown
                .sets
                .iter()
                .filter(|s| s.stage == j)
                .map(|s| s.path.trim_end_matches(&format!("-{j}")).to_string())
                .collect()
        };
        let got = (at(2).len(), at(3).len());
        if got != v.group_counts() {
            return fail(format!("{v}: groups {got:?}, expected {:?}", v.group_counts()));
        }
        if v == SqrVariant::II && at(3) != ["0-1-2", "0-2", "0-1"] {
            return fail(format!("II stage-3 inputs {:?}", at(3)));
        }
    }
    Ok("(1,1) (1,2) (2,3) (2,4)".into())
}
