//! One training forward pass over every collected query set, and the
//! primary-chain inference path.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::boxes::{BoxCxcywh, ImageTargets};
use crate::decoder::{select::top_k_indices, CrossTrace, QueryState};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::neck::EncoderMemory;
use crate::nn::Mode;
use crate::ops;

use super::loss::{detection_loss, match_predictions, scalar, LossConfig};
use super::{sqr_collect, QueryCollection, SqrVariant};

/// Loss of one supervised prediction set. Stage 0 is the encoder auxiliary head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub stage: usize,
    pub path: String,
    pub weight: f64,
    pub class: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub matched: usize,
}

/// Per-set records and their group-weighted totals;
/// total = class_w·class + l1_w·box_l1 + giou_w·giou.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sets: Vec<SetRecord>,
    pub class: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub total: f64,
}

pub struct TrainingLoss {
    /// Scalar loss to differentiate.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

struct Accumulator<'a> {
    targets: &'a [ImageTargets],
    cfg: &'a LossConfig,
    total: Option<Tensor>,
    breakdown: LossBreakdown,
}

impl Accumulator<'_> {
    fn add(&mut self, stage: usize, path: String, weight: f64, logits: &Tensor, boxes: &Tensor) -> Result<()> {
        let matches = match_predictions(logits, boxes, self.targets, &self.cfg.matching)?;
        let set = detection_loss(logits, boxes, self.targets, &matches, self.cfg)?;
        let term = (set.weighted(self.cfg)? * weight)?;
        self.total = Some(match self.total.take() {
            Some(t) => (t + term)?,
            None => term,
        });
        let rec = SetRecord {
            stage,
            path,
            weight,
            class: scalar(&set.class)?,
            box_l1: scalar(&set.l1)?,
            giou: scalar(&set.giou)?,
            matched: matches.iter().map(|m| m.pairs.len()).sum(),
        };
        let b = &mut self.breakdown;
        b.class += weight * rec.class;
        b.box_l1 += weight * rec.box_l1;
        b.giou += weight * rec.giou;
        b.sets.push(rec);
        Ok(())
    }
}

/// Forward pass with full supervision under `variant`. Groups whose path is
/// not the primary cascade are weighted by `recollect_weight`.
pub fn sqr_training_step(
    model: &Detector,
    images: &Tensor,
    targets: &[ImageTargets],
    variant: SqrVariant,
    recollect_weight: f64,
    cfg: &LossConfig,
) -> Result<TrainingLoss> {
    let stages = model.decoder.stages.len();
    if variant != SqrVariant::Baseline && stages != 3 {
        return Err(Error::Config(format!("recollection needs 3 decoder stages, model has {stages}")));
    }
    let neck = model.encode(images, Mode::Train)?;
    let memory = &neck.memory;
    let sel = model.decoder.selector.select(memory)?;
    let mut acc = Accumulator {
        targets,
        cfg,
        total: None,
        breakdown: LossBreakdown::default(),
    };
    acc.add(0, "enc".into(), 1.0, &sel.logits, &sel.boxes)?;

    let nq = model.decoder.config.num_queries;
    let mut collection = QueryCollection::initial(sel.queries);
    for j in 1..=stages {
        let states: Vec<&QueryState> = collection.entries.iter().map(|e| &e.state).collect();
        let joined = QueryState::concat(&states)?;
        let sizes = vec![nq; states.len()];
        let out = model.decoder.run_stage(j, &joined, memory, &sizes)?;
        let mut next = Vec::with_capacity(states.len());
        for (g, entry) in collection.entries.iter().enumerate() {
            let mut path = entry.path.clone();
            path.push(j);
            let primary = path.iter().enumerate().all(|(i, &s)| i == s);
            let weight = if primary { 1.0 } else { recollect_weight };
            let logits = out.logits.narrow(1, g * nq, nq)?;
            let boxes = out.boxes.narrow(1, g * nq, nq)?;
            acc.add(j, super::path_tag(&path), weight, &logits, &boxes)?;
            next.push(out.next.slice(g * nq, nq)?);
        }
        if j < stages {
            collection = if j <= 2 {
                sqr_collect(variant, j, &collection, next)?
            } else {
                let mut path = collection.entries[0].path.clone();
                path.push(j);
                QueryCollection {
                    stage: j + 1,
                    entries: vec![super::CollectedQuery { path, state: next.swap_remove(0) }],
                }
            };
        }
    }
    let total = acc.total.expect("encoder set is always present");
    ops::ensure_finite(&total, "training loss")?;
    let mut breakdown = acc.breakdown;
    breakdown.total = scalar(&total)?;
    Ok(TrainingLoss { total, breakdown })
}

/// Raw predictions of one stage (0 = encoder selection).
#[derive(Debug, Clone)]
pub struct StagePredictions {
    pub stage: usize,
    /// (B, N_q, K) class logits.
    pub logits: Tensor,
    /// (B, N_q, 4) boxes, normalized cxcywh.
    pub boxes: Tensor,
}

impl StagePredictions {
    /// Per-image sigmoid scores (N_q·K) and boxes on the host.
    pub fn to_host(&self) -> Result<Vec<(Vec<f64>, Vec<BoxCxcywh>)>> {
        let (b, q, k) = self.logits.dims3()?;
        let s = ops::to_f64_vec(&ops::sigmoid(&self.logits)?)?;
        let bx = ops::to_f64_vec(&self.boxes)?;
        Ok((0..b)
            .map(|i| {
                let scores = s[i * q * k..(i + 1) * q * k].to_vec();
                let boxes = (0..q)
                    .map(|j| {
                        let o = (i * q + j) * 4;
                        [bx[o], bx[o + 1], bx[o + 2], bx[o + 3]]
                    })
                    .collect();
                (scores, boxes)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    pub label: usize,
    pub bbox: BoxCxcywh,
    pub query: usize,
}

pub struct InferenceOutput {
    pub encoder: StagePredictions,
    /// Stages 1..=num_stages of the primary chain.
    pub stages: Vec<StagePredictions>,
    /// Cross-attention sampling per stage; None when capture was disabled.
    pub traces: Option<Vec<CrossTrace>>,
    pub self_attention: Vec<Tensor>,
    /// (B, heads, HW, HW) at the deepest level.
    pub aifi_attention: Tensor,
    pub s5_hw: (usize, usize),
    pub memory: EncoderMemory,
    /// Top-k detections per image from the last stage.
    pub detections: Vec<Vec<Detection>>,
}

/// Top-`k` (query, class) pairs over flattened N_q×K scores; ties go to the
/// lower flat index.
pub fn final_detections(scores: &[f64], boxes: &[BoxCxcywh], num_classes: usize, k: usize) -> Vec<Detection> {
    top_k_indices(scores, k)
        .into_iter()
        .map(|i| Detection {
            score: scores[i],
            label: i % num_classes,
            bbox: boxes[i / num_classes],
            query: i / num_classes,
        })
        .collect()
}

pub const MAX_DETECTIONS: usize = 100;

/// Evaluation forward along q⁰ → q^{0-1} → … only.
pub fn inference_forward(model: &Detector, images: &Tensor) -> Result<InferenceOutput> {
    inference_forward_with(model, images, true)
}

pub fn inference_forward_with(model: &Detector, images: &Tensor, capture_traces: bool) -> Result<InferenceOutput> {
    let neck = model.encode(images, Mode::Eval)?;
    let memory = neck.memory;
    let sel = model.decoder.selector.select(&memory)?;
    let nq = model.decoder.config.num_queries;
    let mut q = sel.queries;
    let mut stages = Vec::new();
    let mut traces = Vec::new();
    let mut self_attention = Vec::new();
    for j in 1..=model.decoder.stages.len() {
        let out = model.decoder.run_stage(j, &q, &memory, &[nq])?;
        stages.push(StagePredictions {
            stage: j,
            logits: out.logits.detach(),
            boxes: out.boxes.detach(),
        });
        if capture_traces {
            traces.push(out.trace);
        }
        self_attention.push(out.self_attention.detach());
        q = out.next;
    }
    let k = model.decoder.config.num_classes;
    let last = stages.last().expect("decoder has stages");
    let detections = last
        .to_host()?
        .into_iter()
        .map(|(s, b)| final_detections(&s, &b, k, MAX_DETECTIONS))
        .collect();
    Ok(InferenceOutput {
        encoder: StagePredictions {
            stage: 0,
            logits: sel.logits.detach(),
            boxes: sel.boxes.detach(),
        },
        stages,
        traces: capture_traces.then_some(traces),
        self_attention,
        aifi_attention: neck.aifi_attention.detach(),
        s5_hw: neck.s5_hw,
        memory,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::{DType, Device};

    fn tiny_config() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn batch() -> (Tensor, Vec<ImageTargets>) {
        let images = (crate::gradcheck::random_var((2, 3, 64, 64), 5).unwrap().as_tensor() * 1.0).unwrap();
        let t = vec![
            ImageTargets { boxes: vec![[0.3, 0.3, 0.1, 0.1], [0.6, 0.7, 0.15, 0.1]], labels: vec![0, 2] },
            ImageTargets { boxes: vec![[0.5, 0.5, 0.2, 0.2]], labels: vec![1] },
        ];
        (images, t)
    }

    #[test]
    fn supervised_set_counts() {
        let model = Detector::new(&tiny_config(), 1, DType::F64).unwrap();
        let (images, t) = batch();
        let cfg = LossConfig::default();
        for (v, n) in [(SqrVariant::Baseline, 4), (SqrVariant::I, 5), (SqrVariant::II, 7), (SqrVariant::III, 8)] {
            let out = sqr_training_step(&model, &images, &t, v, 1.0, &cfg).unwrap();
            assert_eq!(out.breakdown.sets.len(), n, "{v}");
            let b = &out.breakdown;
            let w = b.class * cfg.class_weight + b.box_l1 * cfg.l1_weight + b.giou * cfg.giou_weight;
            assert!((w - b.total).abs() < 1e-9 * b.total.abs().max(1.0));
            assert!(b.sets.iter().all(|s| s.class >= 0.0 && s.box_l1 >= 0.0 && s.giou >= 0.0));
        }
        let ii = sqr_training_step(&model, &images, &t, SqrVariant::II, 1.0, &cfg).unwrap();
        let paths: Vec<&str> = ii.breakdown.sets.iter().map(|s| s.path.as_str()).collect();
        assert_eq!(paths, vec!["enc", "0-1", "0-1-2", "0-2", "0-1-2-3", "0-2-3", "0-1-3"]);
    }

    #[test]
    fn zero_weight_recollection_equals_baseline() {
        let model = Detector::new(&tiny_config(), 2, DType::F64).unwrap();
        let (images, t) = batch();
        let cfg = LossConfig::default();
        let base = sqr_training_step(&model, &images, &t, SqrVariant::Baseline, 1.0, &cfg).unwrap();
        for v in [SqrVariant::I, SqrVariant::II, SqrVariant::III] {
            let z = sqr_training_step(&model, &images, &t, v, 0.0, &cfg).unwrap();
            assert!((z.breakdown.total - base.breakdown.total).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn stages_share_weights_across_groups() {
        // one parameter set per stage, whatever the number of groups
        let model = Detector::new(&tiny_config(), 3, DType::F64).unwrap();
        let names = model.store.names_with_prefix("decoder.stage2.");
        assert!(!names.is_empty());
        assert!(model.store.names_with_prefix("decoder.stage4.").is_empty());
        let (images, t) = batch();
        let out = sqr_training_step(&model, &images, &t, SqrVariant::III, 1.0, &LossConfig::default()).unwrap();
        let grads = out.total.backward().unwrap();
        let w = model.store.get(&names[0]).unwrap();
        assert!(grads.get(w.as_tensor()).is_some());
    }

    #[test]
    fn final_detections_take_top_scores() {
        let scores = [0.1, 0.9, 0.3, 0.9, 0.2, 0.8];
        let boxes = [[0.1, 0.1, 0.1, 0.1], [0.2, 0.2, 0.2, 0.2], [0.3, 0.3, 0.3, 0.3]];
        let d = final_detections(&scores, &boxes, 2, 3);
        assert_eq!(d.iter().map(|d| (d.query, d.label)).collect::<Vec<_>>(), vec![(0, 1), (1, 1), (2, 1)]);
        assert_eq!(d[1].bbox, boxes[1]);
        assert_eq!(final_detections(&scores, &boxes, 2, 100).len(), 6);
    }

    #[test]
    fn inference_exposes_every_stage() {
        let model = Detector::new(&tiny_config(), 4, DType::F64).unwrap();
        let (images, _) = batch();
        let out = inference_forward(&model, &images).unwrap();
        assert_eq!(out.stages.len(), 3);
        assert_eq!(out.detections.len(), 2);
        assert_eq!(out.detections[0].len(), 30);
        let again = inference_forward(&model, &images).unwrap();
        assert_eq!(
            ops::to_f64_vec(&out.stages[2].logits).unwrap(),
            ops::to_f64_vec(&again.stages[2].logits).unwrap()
        );
        let b = ops::to_f64_vec(&out.stages[2].boxes).unwrap();
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        let _ = Device::Cpu;
    }
}
