//! Per-image analysis exports: encoder attention map, decoder sampling
//! records and per-stage predictions.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{collate, DetectionSample};
use crate::error::{Error, Result};
use crate::eval::{aifi_attention_map, export_sampling_records, write_attention_npy, write_csv, write_json};
use crate::model::Detector;
use crate::sqr::{inference_forward, Detection};

use super::config::RunConfig;
use super::dataset::{fit, Split, SplitName};
use super::evaluate::load_detector;

/// Images to analyze: validation indices, or every PNG/JPEG in a directory.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSelection {
    Ids(Vec<usize>),
    Dir(PathBuf),
}

impl FromStr for ImageSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let p = Path::new(s);
        if p.is_dir() {
            return Ok(ImageSelection::Dir(p.to_path_buf()));
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ImageSelection::Ids)
            .map_err(|_| Error::Config(format!("{s:?} is neither a directory nor a comma-separated id list")))
    }
}

/// One query at one stage: top class, its score and the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDump {
    pub query: usize,
    pub label: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDump {
    pub stage: usize,
    pub queries: Vec<QueryDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub image_id: u64,
    pub stages: Vec<StageDump>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzedImage {
    pub image_id: u64,
    pub dir: PathBuf,
    pub attention_shape: (usize, usize),
    pub sampling_rows: usize,
}

pub const ATTENTION_FILE: &str = "attention.npy";
pub const SAMPLING_FILE: &str = "sampling.csv";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const INPUT_FILE: &str = "input.png";

fn load_selection(cfg: &RunConfig, sel: &ImageSelection) -> Result<Vec<DetectionSample>> {
    match sel {
        ImageSelection::Ids(ids) => {
            let split = Split::open(cfg, SplitName::Val)?;
            ids.iter().map(|&i| Ok(split.get(i)?.sample)).collect()
        }
        ImageSelection::Dir(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("no PNG or JPEG images in {}", dir.display())));
            }
            files
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let img = image::open(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?.to_rgb32f();
                    let (w, h) = (img.width() as usize, img.height() as usize);
                    let n = w * h;
                    let mut pixels = vec![0f32; 3 * n];
                    for (x, y, p) in img.enumerate_pixels() {
                        for c in 0..3 {
                            pixels[c * n + y as usize * w + x as usize] = p.0[c];
                        }
                    }
                    let raw = DetectionSample {
                        id: i as u64,
                        width: w,
                        height: h,
                        pixels,
                        targets: Default::default(),
                        padding: (0, 0),
                    };
                    Ok(fit(raw, cfg.model.image_size)?.sample)
                })
                .collect()
        }
    }
}

fn save_png(path: &Path, s: &DetectionSample) -> Result<()> {
    let n = s.width * s.height;
    let img = image::RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let i = y as usize * s.width + x as usize;
        image::Rgb([0, 1, 2].map(|c| (s.pixels[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Analyzes one image with a loaded model and writes its exports to `dir`.
pub fn analyze_image(model: &Detector, sample: &DetectionSample, dir: &Path) -> Result<AnalyzedImage> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (images, _) = collate(std::slice::from_ref(sample), model.dtype(), &Device::Cpu)?;
    let out = inference_forward(model, &images)?;
    let (h, w) = out.s5_hw;
    let map = aifi_attention_map(&out.aifi_attention.get(0)?, h, w)?;
    write_attention_npy(&dir.join(ATTENTION_FILE), &map)?;
    let records = export_sampling_records(out.traces.as_deref(), &[sample.id])?;
    write_csv(&dir.join(SAMPLING_FILE), &records)?;

    let k = model.config.decoder.num_classes;
    let stages = std::iter::once(&out.encoder)
        .chain(&out.stages)
        .map(|st| {
            let (scores, boxes) = st.to_host()?.swap_remove(0);
            let queries = boxes
                .iter()
                .enumerate()
                .map(|(q, b)| {
                    let row = &scores[q * k..(q + 1) * k];
                    let (label, score) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &s)| if s > best.1 { (c, s) } else { best });
                    QueryDump { query: q, label, score, bbox: *b }
                })
                .collect();
            Ok(StageDump { stage: st.stage, queries })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &dir.join(PREDICTIONS_FILE),
        &PredictionDump {
            image_id: sample.id,
            stages,
            detections: out.detections.into_iter().next().unwrap_or_default(),
        },
    )?;
    save_png(&dir.join(INPUT_FILE), sample)?;
    Ok(AnalyzedImage {
        image_id: sample.id,
        dir: dir.to_path_buf(),
        attention_shape: (map.height, map.width),
        sampling_rows: records.len(),
    })
}

/// Writes exports for every selected image under `<output>/analyze/image_<id>`.
pub fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, selection: &ImageSelection) -> Result<Vec<AnalyzedImage>> {
    let model = load_detector(cfg, checkpoint)?;
    let root = cfg.resolved_output_dir().join("analyze");
    load_selection(cfg, selection)?
        .iter()
        .map(|s| analyze_image(&model, s, &root.join(format!("image_{:05}", s.id))))
        .collect()
}
