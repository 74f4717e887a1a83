//! Validation: COCO AP on the final stage plus stage-fading rates.

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::collate;
use crate::error::{Error, Result};
use crate::eval::{average_precision, fading_reports, write_json, ApReport, EvalImage, FadingReport, StageImagePredictions};
use crate::model::Detector;
use crate::sqr::{inference_forward_with, Detection};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::{LoadedSample, Split, SplitName};

/// Predictions for one image: every decoder stage plus final detections.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub stages: Vec<StageImagePredictions>,
    pub detections: Vec<Detection>,
}

pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, batch: &[LoadedSample]) -> Result<Vec<ImagePrediction>>;
}

impl Predictor for Detector {
    fn num_classes(&self) -> usize {
        self.config.decoder.num_classes
    }

    fn predict(&self, batch: &[LoadedSample]) -> Result<Vec<ImagePrediction>> {
        let samples: Vec<_> = batch.iter().map(|s| s.sample.clone()).collect();
        let (images, _) = collate(&samples, self.dtype(), &Device::Cpu)?;
        let out = inference_forward_with(self, &images, false)?;
        let k = self.num_classes();
        let per_stage = out.stages.iter().map(|s| s.to_host()).collect::<Result<Vec<_>>>()?;
        Ok(out
            .detections
            .into_iter()
            .enumerate()
            .map(|(i, detections)| ImagePrediction {
                stages: per_stage
                    .iter()
                    .map(|s| StageImagePredictions {
                        scores: s[i].0.clone(),
                        boxes: s[i].1.clone(),
                        num_classes: k,
                    })
                    .collect(),
                detections,
            })
            .collect())
    }
}

/// Emits the ground truth itself, one query per box, at score 1 on three
/// identical stages.
pub struct OraclePredictor {
    pub num_classes: usize,
}

impl Predictor for OraclePredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, batch: &[LoadedSample]) -> Result<Vec<ImagePrediction>> {
        Ok(batch
            .iter()
            .map(|s| {
                let t = &s.sample.targets;
                let mut scores = vec![0.0; t.len() * self.num_classes];
                for (q, &l) in t.labels.iter().enumerate() {
                    scores[q * self.num_classes + l] = 1.0;
                }
                let stage = StageImagePredictions {
                    scores,
                    boxes: t.boxes.clone(),
                    num_classes: self.num_classes,
                };
                ImagePrediction {
                    stages: vec![stage.clone(), stage.clone(), stage],
                    detections: t
                        .boxes
                        .iter()
                        .zip(&t.labels)
                        .enumerate()
                        .map(|(q, (b, &l))| Detection { score: 1.0, label: l, bbox: *b, query: q })
                        .collect(),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub num_images: usize,
    pub ap: ApReport,
    /// One row per τ against the union of stages 1 and 2; empty for decoders
    /// with fewer than three stages.
    pub fading: Vec<FadingReport>,
}

pub fn evaluate(predictor: &dyn Predictor, split: &Split, batch_size: usize, score_floor: f64) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(split.len());
    let mut stages: Vec<Vec<StageImagePredictions>> = Vec::new();
    let mut gts = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(batch_size.max(1)) {
        let batch = (start..(start + batch_size).min(split.len()))
            .map(|i| split.get(i))
            .collect::<Result<Vec<_>>>()?;
        for (s, p) in batch.iter().zip(predictor.predict(&batch)?) {
            if stages.is_empty() {
                stages = vec![Vec::new(); p.stages.len()];
            }
            if p.stages.len() != stages.len() {
                return Err(Error::Shape("predictor changed its stage count".into()));
            }
            for (dst, st) in stages.iter_mut().zip(p.stages) {
                dst.push(st);
            }
            gts.push(s.sample.targets.clone());
            images.push(EvalImage {
                width: s.native_side,
                height: s.native_side,
                targets: s.sample.targets.clone(),
                detections: p.detections,
            });
        }
    }
    let ap = average_precision(&images, predictor.num_classes())?;
    let fading = if stages.len() >= 3 {
        fading_reports(&stages, &gts, score_floor, &[1, 2])?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        split: split.name.to_string(),
        num_images: images.len(),
        ap,
        fading,
    })
}

/// Builds a detector for `cfg` and loads checkpoint weights into it.
pub fn load_detector(cfg: &RunConfig, checkpoint: &Path) -> Result<Detector> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = Detector::new(&cfg.model, cfg.seed, cfg.precision.dtype())?;
    ck.restore_store(&model.store)?;
    Ok(model)
}

/// Evaluates a checkpoint and writes `eval_<split>.json` to the output directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: SplitName) -> Result<EvalReport> {
    let model = load_detector(cfg, checkpoint)?;
    let data = Split::open(cfg, split)?;
    let report = evaluate(&model, &data, cfg.eval.batch_size, cfg.eval.score_floor)?;
    write_json(&cfg.resolved_output_dir().join(format!("eval_{split}.json")), &report)?;
    Ok(report)
}
