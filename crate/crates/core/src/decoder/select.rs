//! Query initialization from the encoder tokens: an auxiliary head scores
//! every token and the top-N_q tokens seed the decoder.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::neck::EncoderMemory;
use crate::nn::{LayerNorm, Linear, Mlp, ParamBuilder};
use crate::ops;

use super::QueryState;

/// Logit of the class prior used to initialize classification biases.
pub fn prior_logit(p: f64) -> f64 {
    -((1.0 - p) / p).ln()
}

/// Output of query selection.
pub struct Selection {
    /// Detached content and reference boxes for the first decoder stage.
    pub queries: QueryState,
    /// Auxiliary predictions of the selected tokens, with gradients (B, N_q, K) / (B, N_q, 4).
    pub logits: Tensor,
    pub boxes: Tensor,
    /// Selected token indices per image.
    pub indices: Vec<Vec<usize>>,
}

#[derive(Clone)]
pub struct QuerySelector {
    pub enc_output: Linear,
    pub enc_norm: LayerNorm,
    pub score_head: Linear,
    pub box_head: Mlp,
    pub num_queries: usize,
}

/// Indices of the `k` largest scores, descending; equal scores keep the
/// lower index first.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Anchor boxes in logit space (S, 4): cell centres with side 0.05·2^level.
pub fn anchor_logits(shapes: &[(usize, usize)], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = Vec::new();
    let logit = |v: f64| (v / (1.0 - v)).ln();
    for (lvl, &(h, w)) in shapes.iter().enumerate() {
        let side = 0.05 * 2f64.powi(lvl as i32);
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                let cy = (i as f64 + 0.5) / h as f64;
                data.extend([logit(cx), logit(cy), logit(side), logit(side)]);
            }
        }
    }
    let s = data.len() / 4;
    Ok(Tensor::from_vec(data, (s, 4), device)?.to_dtype(dtype)?)
}

impl QuerySelector {
    pub fn new(pb: &ParamBuilder, dim: usize, num_classes: usize, num_queries: usize) -> Result<Self> {
        let score_head = Linear::new(&pb.pp("score_head"), dim, num_classes)?;
        score_head.bias.set(&(score_head.bias.ones_like()? * prior_logit(0.01))?)?;
        let box_head = Mlp::new(&pb.pp("box_head"), &[dim, dim, dim, 4])?;
        let last = box_head.last();
        last.weight.set(&last.weight.zeros_like()?)?;
        last.bias.set(&last.bias.zeros_like()?)?;
        Ok(Self {
            enc_output: Linear::new(&pb.pp("enc_output"), dim, dim)?,
            enc_norm: LayerNorm::new(&pb.pp("enc_norm"), dim)?,
            score_head,
            box_head,
            num_queries,
        })
    }

    pub fn select(&self, memory: &EncoderMemory) -> Result<Selection> {
        let (b, s, d) = memory.tokens.dims3()?;
        let nq = self.num_queries;
        if s < nq {
            return Err(Error::Config(format!("{s} encoder tokens cannot seed {nq} queries")));
        }
        let feats = self.enc_norm.forward(&self.enc_output.forward(&memory.tokens)?)?;
        let logits = self.score_head.forward(&feats)?;
        let anchors = anchor_logits(&memory.level_shapes, feats.dtype(), feats.device())?;
        let boxes = ops::sigmoid(&self.box_head.forward(&feats)?.broadcast_add(&anchors)?)?;

        let best = ops::to_f64_vec(&logits.max(D::Minus1)?)?;
        let mut indices = Vec::with_capacity(b);
        let mut flat = Vec::with_capacity(b * nq);
        for i in 0..b {
            let sel = top_k_indices(&best[i * s..(i + 1) * s], nq);
            flat.extend(sel.iter().map(|&t| (i * s + t) as u32));
            indices.push(sel);
        }
        let index = Tensor::from_vec(flat, b * nq, feats.device())?;
        let k = logits.dim(2)?;
        let gather = |t: &Tensor, c: usize| -> Result<Tensor> {
            Ok(t.reshape((b * s, c))?.index_select(&index, 0)?.reshape((b, nq, c))?)
        };
        let sel_feats = gather(&feats, d)?;
        let sel_boxes = gather(&boxes, 4)?;
        Ok(Selection {
            queries: QueryState {
                content: sel_feats.detach(),
                boxes: sel_boxes.detach(),
            },
            logits: gather(&logits, k)?,
            boxes: sel_boxes,
            indices,
        })
    }
}
