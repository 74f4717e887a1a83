//! Procedural scenes of many small shapes over textured, cluttered backgrounds.
//! Class k is drawn as shape k (rectangle, ellipse, cross) with a colour
//! leaning towards channel k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::ImageTargets;
use crate::error::{Error, Result};

use super::DetectionSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    pub num_objects: (usize, usize),
    /// Side length range in pixels.
    pub object_px: (usize, usize),
    pub num_classes: usize,
    pub clutter_density: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_objects: (4, 12),
            object_px: (6, 16),
            num_classes: 3,
            clutter_density: 0.3,
            occlusion_prob: 0.1,
            seed: 0,
        }
    }
}

pub const NUM_SHAPES: usize = 3;

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_px;
        if lo < 4 || hi < lo || hi > self.image_size {
            return Err(Error::Config(format!("object size range {lo}..={hi} px is invalid")));
        }
        let (a, b) = self.num_objects;
        if b > 64 || a > b {
            return Err(Error::Config(format!("object count range {a}..={b} is invalid (max 64)")));
        }
        if self.num_classes == 0 || self.num_classes > NUM_SHAPES {
            return Err(Error::Config(format!("synthetic scenes support 1..={NUM_SHAPES} classes")));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("clutter density and occlusion probability must lie in [0,1]".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }
}

/// A rendered scene together with its object-free background.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub sample: DetectionSample,
    pub background: Vec<f32>,
    /// Per-object pixel masks (row-major, image-sized).
    pub masks: Vec<Vec<bool>>,
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let n = self.size * self.size;
        for (ch, v) in c.iter().enumerate() {
            self.px[ch * n + y * self.size + x] = *v;
        }
    }
}

fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    // smooth noise from a coarse grid, bilinearly upsampled, plus fine grain
    let g = 9;
    let n = size * size;
    let mut px = vec![0f32; 3 * n];
    for ch in 0..3 {
        let base: f64 = rng.random_range(0.42..0.58);
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-0.08..0.08)).collect();
        for y in 0..size {
            let fy = y as f64 / (size - 1) as f64 * (g - 1) as f64;
            let (y0, ty) = ((fy.floor() as usize).min(g - 2), fy - (fy.floor()).min((g - 2) as f64));
            for x in 0..size {
                let fx = x as f64 / (size - 1) as f64 * (g - 1) as f64;
                let (x0, tx) = ((fx.floor() as usize).min(g - 2), fx - (fx.floor()).min((g - 2) as f64));
                let at = |i: usize, j: usize| grid[i * g + j];
                let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                    + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                let grain: f64 = rng.random_range(-0.03..0.03);
                px[ch * n + y * size + x] = (base + v + grain) as f32;
            }
        }
    }
    px
}

fn object_colour(rng: &mut ChaCha8Rng, class: usize) -> [f32; 3] {
    let mut c = [0f32; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        let high = if ch == class { true } else { rng.random_bool(0.3) };
        *v = if high { rng.random_range(0.82..0.97) } else { rng.random_range(0.03..0.18) };
    }
    if c.iter().all(|v| *v > 0.5) {
        c[(class + 1) % 3] = rng.random_range(0.03..0.18);
    }
    c
}

/// Pixels covered by `class`'s shape in the box (x0, y0, w, h).
fn shape_mask(class: usize, w: usize, h: usize) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = match class {
                0 => true,
                1 => {
                    let dx = (x as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
                    let dy = (y as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                _ => {
                    let tw = ((w as f64 * 0.4).ceil() as usize).max(2);
                    let th = ((h as f64 * 0.4).ceil() as usize).max(2);
                    let in_v = x >= (w - tw) / 2 && x < (w - tw) / 2 + tw;
                    let in_h = y >= (h - th) / 2 && y < (h - th) / 2 + th;
                    in_v || in_h
                }
            };
            m[y * w + x] = inside;
        }
    }
    m
}

fn overlap_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let ix = (a.0 + a.2).min(b.0 + b.2).saturating_sub(a.0.max(b.0));
    let iy = (a.1 + a.3).min(b.1 + b.3).saturating_sub(a.1.max(b.1));
    let inter = (ix * iy) as f64;
    inter / ((a.2 * a.3 + b.2 * b.3) as f64 - inter)
}

/// Deterministic in (cfg, index).
pub fn render_synthetic_scene(cfg: &SyntheticSceneConfig, index: u64) -> Result<SceneRender> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = child_rng(cfg.seed, index);
    let bg = background(&mut rng, size);
    let mut canvas = Canvas { size, px: bg.clone() };

    let clutter = (cfg.clutter_density * 40.0).round() as usize;
    for _ in 0..clutter {
        let c = [rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        if rng.random_bool(0.5) {
            // thin segment
            let len = rng.random_range(3..=10);
            let horizontal = rng.random_bool(0.5);
            let x0 = rng.random_range(0..size);
            let y0 = rng.random_range(0..size);
            for t in 0..len {
                let (x, y) = if horizontal { (x0 + t, y0) } else { (x0, y0 + t) };
                if x < size && y < size {
                    canvas.set(x, y, c);
                }
            }
        } else {
            let x0 = rng.random_range(0..size - 2);
            let y0 = rng.random_range(0..size - 2);
            for dy in 0..2 {
                for dx in 0..2 {
                    canvas.set(x0 + dx, y0 + dy, c);
                }
            }
        }
    }

    let count = rng.random_range(cfg.num_objects.0..=cfg.num_objects.1);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(count);
    let mut targets = ImageTargets::default();
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        let side = rng.random_range(cfg.object_px.0..=cfg.object_px.1) as f64;
        let aspect: f64 = rng.random_range(0.75..1.33);
        let w = ((side * aspect.sqrt()).round() as usize).clamp(cfg.object_px.0, cfg.object_px.1);
        let h = ((side / aspect.sqrt()).round() as usize).clamp(cfg.object_px.0, cfg.object_px.1);
        let occlude = !placed.is_empty() && rng.random_bool(cfg.occlusion_prob);
        let mut spot = None;
        if occlude {
            // slide along one axis until the overlap lands in 30–70% IoU
            let target_iou: f64 = rng.random_range(0.3..0.7);
            let other = placed[rng.random_range(0..placed.len())];
            let horizontal = rng.random_bool(0.5);
            let mut best = None;
            for shift in 0..=w.max(h) {
                let (x, y) = if horizontal { (other.0 + shift, other.1) } else { (other.0, other.1 + shift) };
                if x + w > size || y + h > size {
                    break;
                }
                let iou = overlap_iou(other, (x, y, w, h));
                if (0.3..=0.7).contains(&iou) {
                    let d = (iou - target_iou).abs();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, (x, y)));
                    }
                }
            }
            spot = best.map(|(_, p)| p);
        }
        if spot.is_none() {
            for _ in 0..30 {
                let x = rng.random_range(0..=size - w);
                let y = rng.random_range(0..=size - h);
                let free = placed.iter().all(|p| overlap_iou(*p, (x, y, w, h)) == 0.0);
                spot = Some((x, y));
                if free {
                    break;
                }
            }
        }
        let (x0, y0) = spot.expect("at least one placement attempt");
        let colour = object_colour(&mut rng, class);
        let local = shape_mask(class, w, h);
        let mut full = vec![false; size * size];
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if local[y * w + x] {
                    canvas.set(x0 + x, y0 + y, colour);
                    full[(y0 + y) * size + x0 + x] = true;
                    xmin = xmin.min(x0 + x);
                    ymin = ymin.min(y0 + y);
                    xmax = xmax.max(x0 + x + 1);
                    ymax = ymax.max(y0 + y + 1);
                }
            }
        }
        let s = size as f64;
        targets.boxes.push([
            (xmin + xmax) as f64 / 2.0 / s,
            (ymin + ymax) as f64 / 2.0 / s,
            (xmax - xmin) as f64 / s,
            (ymax - ymin) as f64 / s,
        ]);
        targets.labels.push(class);
        placed.push((x0, y0, w, h));
        masks.push(full);
    }
    for v in canvas.px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SceneRender {
        sample: DetectionSample {
            id: index,
            width: size,
            height: size,
            pixels: canvas.px,
            targets,
            padding: (0, 0),
        },
        background: bg.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        masks,
    })
}

pub fn generate_synthetic_scene(cfg: &SyntheticSceneConfig, index: u64) -> Result<DetectionSample> {
    Ok(render_synthetic_scene(cfg, index)?.sample)
}
