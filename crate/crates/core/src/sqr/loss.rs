//! Set-prediction loss: sigmoid focal classification over every query plus L1
//! and GIoU on matched boxes, normalized by the number of targets.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::boxes::{giou_tensor, ImageTargets};
use crate::error::{Error, Result};
use crate::ops;

use super::matching::{hungarian, match_cost, MatchResult, MatchWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub matching: MatchWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weight: 1.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            matching: MatchWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal alpha must lie in [0,1] and gamma be non-negative".into()));
        }
        if [self.class_weight, self.l1_weight, self.giou_weight].iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components of one prediction set, as scalar tensors.
pub struct SetLoss {
    pub class: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
}

impl SetLoss {
    pub fn weighted(&self, cfg: &LossConfig) -> Result<Tensor> {
        Ok(((&self.class * cfg.class_weight)? + (&self.l1 * cfg.l1_weight)? + (&self.giou * cfg.giou_weight)?)?)
    }
}

/// Matches every image of a (B, Q, K) / (B, Q, 4) prediction set.
pub fn match_predictions(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[ImageTargets],
    w: &MatchWeights,
) -> Result<Vec<MatchResult>> {
    let (b, q, k) = logits.dims3()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} target sets for a batch of {b}", targets.len())));
    }
    let probs = ops::to_f64_vec(&ops::sigmoid(&logits.detach())?)?;
    let bx = ops::to_f64_vec(&boxes.detach())?;
    let mut out = Vec::with_capacity(b);
    for (i, t) in targets.iter().enumerate() {
        let qb: Vec<[f64; 4]> = (0..q)
            .map(|j| {
                let o = (i * q + j) * 4;
                [bx[o], bx[o + 1], bx[o + 2], bx[o + 3]]
            })
            .collect();
        let cost = match_cost(&probs[i * q * k..(i + 1) * q * k], k, &qb, &t.boxes, &t.labels, w);
        out.push(hungarian(&cost, q, t.len())?);
    }
    Ok(out)
}

/// Sigmoid focal loss summed over all elements.
pub fn focal_loss_sum(logits: &Tensor, target: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let x = logits;
    let ce = ((x.relu()? - (x * target)?)? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    let p = ops::sigmoid(x)?;
    // 1 - p_t = p + t - 2pt
    let miss = ((&p + target)? - ((&p * target)? * 2.0)?)?;
    let modulator = if gamma == 2.0 {
        miss.sqr()?
    } else if gamma == 0.0 {
        miss.ones_like()?
    } else {
        miss.powf(gamma)?
    };
    let alpha_t = ((target * (2.0 * alpha - 1.0))? + (1.0 - alpha))?;
    Ok((((modulator * ce)? * alpha_t)?).sum_all()?)
}

/// Loss of one prediction set given its matches.
pub fn detection_loss(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[ImageTargets],
    matches: &[MatchResult],
    cfg: &LossConfig,
) -> Result<SetLoss> {
    let (b, q, k) = logits.dims3()?;
    if matches.len() != b || targets.len() != b {
        return Err(Error::Shape(format!("batch {b} with {} targets and {} matches", targets.len(), matches.len())));
    }
    let num_gt = targets.iter().map(|t| t.len()).sum::<usize>().max(1) as f64;
    let mut onehot = vec![0f64; b * q * k];
    let mut index = Vec::new();
    let mut tgt = Vec::new();
    for (i, (t, m)) in targets.iter().zip(matches).enumerate() {
        m.validate(q, t.len())?;
        for &(qi, g) in &m.pairs {
            let label = t.labels[g];
            if label >= k {
                return Err(Error::Contract(format!("label {label} outside {k} classes")));
            }
            onehot[(i * q + qi) * k + label] = 1.0;
            index.push((i * q + qi) as u32);
            tgt.extend(t.boxes[g]);
        }
    }
    let dev = logits.device();
    let dtype = logits.dtype();
    let target = Tensor::from_vec(onehot, (b, q, k), dev)?.to_dtype(dtype)?;
    let class = (focal_loss_sum(logits, &target, cfg.focal_alpha, cfg.focal_gamma)? / num_gt)?;

    let (l1, giou) = if index.is_empty() {
        let z = Tensor::zeros((), dtype, dev)?;
        (z.clone(), z)
    } else {
        let n = index.len();
        let idx = Tensor::from_vec(index, n, dev)?;
        let pred = boxes.reshape((b * q, 4))?.index_select(&idx, 0)?;
        let tgt = Tensor::from_vec(tgt, (n, 4), dev)?.to_dtype(dtype)?;
        let l1 = ((&pred - &tgt)?.abs()?.sum_all()? / num_gt)?;
        let g = ((giou_tensor(&pred, &tgt)?.neg()? + 1.0)?.sum_all()? / num_gt)?;
        (l1, g)
    };
    Ok(SetLoss { class, l1, giou })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
