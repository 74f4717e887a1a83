//! Renders analysis exports as PNG overlays.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{imageops, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::SamplingRecord;

use super::analyze::{PredictionDump, ATTENTION_FILE, INPUT_FILE, PREDICTIONS_FILE, SAMPLING_FILE};

/// Blue → cyan → yellow → red ramp for t ∈ [0, 1].
fn ramp(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

fn read_input(dir: &Path) -> Result<RgbImage> {
    let p = dir.join(INPUT_FILE);
    Ok(image::open(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?.to_rgb8())
}

fn save(img: &RgbImage, path: &Path) -> Result<PathBuf> {
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

/// Attention map upsampled over the input, min–max scaled, half-blended.
pub fn attention_overlay(dir: &Path) -> Result<PathBuf> {
    let base = read_input(dir)?;
    let t = Tensor::read_npy(dir.join(ATTENTION_FILE))?.to_dtype(DType::F32)?;
    let (h, w) = t.dims2()?;
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_vec(w as u32, h as u32, v.iter().map(|x| (x - lo) / span).collect())
            .ok_or_else(|| Error::Shape("attention map size".into()))?;
    let up = imageops::resize(&small, base.width(), base.height(), imageops::FilterType::Triangle);
    let out = RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let c = ramp(up.get_pixel(x, y).0[0]);
        let p = base.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|i| (0.5 * p[i] as f32 + 0.5 * 255.0 * c[i]).round() as u8))
    });
    save(&out, &dir.join("attention_overlay.png"))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3], alpha: f32) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for i in 0..3 {
        p.0[i] = ((1.0 - alpha) * p.0[i] as f32 + alpha * c[i] as f32).round() as u8;
    }
}

/// Sampling points of the `top` highest-scoring detections, one image per
/// stage: points as dots whose opacity follows the weight, reference points
/// as green crosses.
pub fn sampling_scatter(dir: &Path, top: usize) -> Result<Vec<PathBuf>> {
    let base = read_input(dir)?;
    let pred_path = dir.join(PREDICTIONS_FILE);
    let text = std::fs::read_to_string(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
    let pred: PredictionDump = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut chosen = BTreeSet::new();
    for d in &pred.detections {
        if chosen.len() == top {
            break;
        }
        chosen.insert(d.query);
    }
    let csv_path = dir.join(SAMPLING_FILE);
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let rows: Vec<SamplingRecord> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let stages: BTreeSet<usize> = rows.iter().map(|r| r.stage).collect();
    let (w, h) = (base.width() as f64, base.height() as f64);
    let wmax = rows.iter().map(|r| r.weight).fold(0.0, f64::max).max(1e-12);
    let mut out = Vec::new();
    for s in stages {
        let mut img = base.clone();
        let sel = rows.iter().filter(|r| r.stage == s && chosen.contains(&r.query_id));
        let mut refs = BTreeSet::new();
        for r in sel {
            let (x, y) = ((r.point_x * w) as i64, (r.point_y * h) as i64);
            let a = (0.25 + 0.75 * r.weight / wmax) as f32;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                put(&mut img, x + dx, y + dy, [255, 40, 40], a);
            }
            refs.insert(((r.ref_x * w) as i64, (r.ref_y * h) as i64));
        }
        for (x, y) in refs {
            for d in -3..=3 {
                put(&mut img, x + d, y, [40, 255, 40], 1.0);
                put(&mut img, x, y + d, [40, 255, 40], 1.0);
            }
        }
        out.push(save(&img, &dir.join(format!("sampling_stage{s}.png")))?);
    }
    Ok(out)
}

/// Renders every image directory under `root` that holds analysis exports.
pub fn cmd_plot(root: &Path, top: usize) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = if root.join(ATTENTION_FILE).is_file() {
        vec![root.to_path_buf()]
    } else {
        std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(ATTENTION_FILE).is_file())
            .collect()
    };
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no analysis exports under {}", root.display())));
    }
    let mut out = Vec::new();
    for d in dirs {
        out.push(attention_overlay(&d)?);
        out.extend(sampling_scatter(&d, top)?);
    }
    Ok(out)
}
