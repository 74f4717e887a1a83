//! Detection samples: synthetic scenes, COCO-style ingestion, resizing and batching.

pub mod coco;
pub mod synthetic;

use candle_core::{DType, Device, Tensor};
use image::{imageops, ImageBuffer, Rgb};

use crate::boxes::ImageTargets;
use crate::error::{Error, Result};

pub use coco::{load_coco_annotations, CocoDataset, CocoRecord};
pub use synthetic::{generate_synthetic_scene, render_synthetic_scene, SceneRender, SyntheticSceneConfig};

/// Per-channel standardization applied when building tensors.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// One image in [0,1], channel-major, with normalized cxcywh targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// 3 × height × width values in [0, 1].
    pub pixels: Vec<f32>,
    pub targets: ImageTargets,
    /// Zero padding added on the right and bottom, in pixels.
    pub padding: (usize, usize),
}

impl DetectionSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.pixels.len() != 3 * self.width * self.height {
            return Err(Error::Shape(format!(
                "{} pixel values for a {}x{} image",
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        if self.targets.boxes.len() != self.targets.labels.len() {
            return Err(Error::Contract("box and label counts differ".into()));
        }
        for (b, &l) in self.targets.boxes.iter().zip(&self.targets.labels) {
            if !b.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!("box {b:?} outside the unit square")));
            }
            if l >= num_classes {
                return Err(Error::Contract(format!("label {l} outside {num_classes} classes")));
            }
        }
        Ok(())
    }

    /// Standardized (3, H, W) tensor.
    pub fn tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.width * self.height;
        let data: Vec<f32> = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, v)| (v - CHANNEL_MEAN[i / n]) / CHANNEL_STD[i / n])
            .collect();
        Ok(Tensor::from_vec(data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Mirror left to right.
    pub fn hflip(&self) -> DetectionSample {
        let (w, h) = (self.width, self.height);
        let mut px = vec![0f32; self.pixels.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    px[(c * h + y) * w + x] = self.pixels[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        let mut targets = self.targets.clone();
        for b in &mut targets.boxes {
            b[0] = 1.0 - b[0];
        }
        DetectionSample {
            pixels: px,
            targets,
            ..self.clone()
        }
    }
}

/// Stacks samples of equal size into (B, 3, H, W) plus their targets.
pub fn collate(samples: &[DetectionSample], dtype: DType, device: &Device) -> Result<(Tensor, Vec<ImageTargets>)> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    }
    let tensors = samples.iter().map(|s| s.tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
    let images = Tensor::stack(&tensors, 0)
        .map_err(|e| Error::Shape(format!("batch images differ in size: {e}")))?;
    Ok((images, samples.iter().map(|s| s.targets.clone()).collect()))
}

/// Result of [`resize_and_pad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resized {
    pub sample: DetectionSample,
    /// Boxes dropped for being under one pixel after scaling.
    pub dropped: usize,
}

/// Aspect-preserving resize so the longer side equals `target`, then zero
/// padding on the right and bottom to a square.
pub fn resize_and_pad(sample: &DetectionSample, target: usize) -> Result<Resized> {
    if target == 0 || target % 32 != 0 {
        return Err(Error::Config(format!("resize target {target} is not divisible by 32")));
    }
    let (w, h) = (sample.width, sample.height);
    if w == 0 || h == 0 {
        return Err(Error::Shape("cannot resize an empty image".into()));
    }
    let scale = target as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let resized: Vec<f32> = if (nw, nh) == (w, h) {
        sample.pixels.clone()
    } else {
        let n = w * h;
        let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let i = y as usize * w + x as usize;
            *p = Rgb([sample.pixels[i], sample.pixels[n + i], sample.pixels[2 * n + i]]);
        }
        let out = imageops::resize(&buf, nw as u32, nh as u32, imageops::FilterType::Triangle);
        let m = nw * nh;
        let mut px = vec![0f32; 3 * m];
        for (x, y, p) in out.enumerate_pixels() {
            let i = y as usize * nw + x as usize;
            for c in 0..3 {
                px[c * m + i] = p.0[c];
            }
        }
        px
    };
    let mut pixels = vec![0f32; 3 * target * target];
    for c in 0..3 {
        for y in 0..nh {
            let src = c * nw * nh + y * nw;
            let dst = c * target * target + y * target;
            pixels[dst..dst + nw].copy_from_slice(&resized[src..src + nw]);
        }
    }
    // pixel x maps to x·nw/w, then normalize by the padded side
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let t = target as f64;
    let mut targets = ImageTargets::default();
    let mut dropped = 0;
    for (b, &l) in sample.targets.boxes.iter().zip(&sample.targets.labels) {
        let bw = b[2] * w as f64 * sx;
        let bh = b[3] * h as f64 * sy;
        if bw < 1.0 || bh < 1.0 {
            dropped += 1;
            continue;
        }
        targets.boxes.push([b[0] * w as f64 * sx / t, b[1] * h as f64 * sy / t, bw / t, bh / t]);
        targets.labels.push(l);
    }
    Ok(Resized {
        sample: DetectionSample {
            id: sample.id,
            width: target,
            height: target,
            pixels,
            targets,
            padding: (target - nw, target - nh),
        },
        dropped,
    })
}

/// Normalized cxcywh to pixel xywh (top-left origin).
pub fn denormalize(b: [f64; 4], width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [(b[0] - b[2] / 2.0) * w, (b[1] - b[3] / 2.0) * h, b[2] * w, b[3] * h]
}

/// Pixel xywh to normalized cxcywh.
pub fn normalize(b: [f64; 4], width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [(b[0] + b[2] / 2.0) / w, (b[1] + b[3] / 2.0) / h, b[2] / w, b[3] / h]
}
