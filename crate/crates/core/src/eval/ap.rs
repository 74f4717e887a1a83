//! COCO-protocol average precision over normalized boxes.

use serde::{Deserialize, Serialize};

use crate::boxes::{cxcywh_to_xyxy, iou_xyxy, ImageTargets};
use crate::error::{Error, Result};
use crate::sqr::Detection;

/// Detections and ground truth of one image; `width`/`height` give the
/// native pixel scale used for the area ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub width: usize,
    pub height: usize,
    pub targets: ImageTargets,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// None when no ground truth falls in the area range.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Per-class AP over all thresholds; None for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

pub const MAX_DETS: usize = 100;
pub const AREA_ALL: (f64, f64) = (0.0, 1e10);
pub const AREA_SMALL: (f64, f64) = (0.0, 32.0 * 32.0);
pub const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const AREA_LARGE: (f64, f64) = (96.0 * 96.0, 1e10);

pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn recall_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Per (image, class) matching at every threshold: for each kept detection,
/// (score, matched per threshold, ignored per threshold), plus the number of
/// non-ignored ground truths.
struct ImageClassEval {
    scores: Vec<f64>,
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn px_box(b: [f64; 4], w: f64, h: f64) -> [f64; 4] {
    let x = cxcywh_to_xyxy(b);
    [x[0] * w, x[1] * h, x[2] * w, x[3] * h]
}

fn evaluate_image_class(img: &EvalImage, class: usize, thresholds: &[f64], area: (f64, f64)) -> ImageClassEval {
    let (w, h) = (img.width as f64, img.height as f64);
    let area_of = |b: &[f64; 4]| (b[2] - b[0]) * (b[3] - b[1]);
    let mut gts: Vec<([f64; 4], bool)> = img
        .targets
        .boxes
        .iter()
        .zip(&img.targets.labels)
        .filter(|(_, &l)| l == class)
        .map(|(b, _)| {
            let p = px_box(*b, w, h);
            let a = area_of(&p);
            (p, a < area.0 || a > area.1)
        })
        .collect();
    // non-ignored ground truth first, stable
    gts.sort_by_key(|g| g.1);
    let mut dts: Vec<(f64, [f64; 4])> = img
        .detections
        .iter()
        .filter(|d| d.label == class)
        .map(|d| (d.score, px_box(d.bbox, w, h)))
        .collect();
    dts.sort_by(|a, b| b.0.total_cmp(&a.0));
    dts.truncate(MAX_DETS);

    let mut matched = vec![vec![false; dts.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; dts.len()]; thresholds.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gts.len()];
        for (d, (_, db)) in dts.iter().enumerate() {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (g, (gb, g_ign)) in gts.iter().enumerate() {
                if gt_taken[g] {
                    continue;
                }
                // once a real match exists, stop at the ignored tail
                if let Some(mi) = m {
                    if !gts[mi].1 && *g_ign {
                        break;
                    }
                }
                let iou = iou_xyxy(*db, *gb);
                if iou < best {
                    continue;
                }
                best = iou;
                m = Some(g);
            }
            match m {
                Some(g) => {
                    gt_taken[g] = true;
                    matched[t][d] = true;
                    ignored[t][d] = gts[g].1;
                }
                None => {
                    let a = area_of(db);
                    ignored[t][d] = a < area.0 || a > area.1;
                }
            }
        }
    }
    ImageClassEval {
        scores: dts.iter().map(|d| d.0).collect(),
        matched,
        ignored,
        num_gt: gts.iter().filter(|g| !g.1).count(),
    }
}

/// 101-point interpolated precision for one class at one threshold index;
/// None when the class has no non-ignored ground truth.
fn class_ap(evals: &[ImageClassEval], t: usize) -> Option<f64> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut rows: Vec<(f64, bool, bool)> = Vec::new();
    for e in evals {
        for d in 0..e.scores.len() {
            rows.push((e.scores[d], e.matched[t][d], e.ignored[t][d]));
        }
    }
    // stable sort keeps image order among equal scores
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, m, ign) in &rows {
        if ign {
            continue;
        }
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// AP over `thresholds` for one area range: (mean over thresholds and classes,
/// per-threshold means, per-class means).
fn ap_for_area(
    images: &[EvalImage],
    num_classes: usize,
    thresholds: &[f64],
    area: (f64, f64),
) -> (Option<f64>, Vec<Option<f64>>, Vec<Option<f64>>) {
    let table: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|c| {
            let evals: Vec<ImageClassEval> = images.iter().map(|im| evaluate_image_class(im, c, thresholds, area)).collect();
            (0..thresholds.len()).map(|t| class_ap(&evals, t)).collect()
        })
        .collect();
    let all = mean(table.iter().flatten().filter_map(|v| *v));
    let per_t = (0..thresholds.len()).map(|t| mean(table.iter().filter_map(|c| c[t]))).collect();
    let per_c = table.iter().map(|c| mean(c.iter().filter_map(|v| *v))).collect();
    (all, per_t, per_c)
}

pub fn average_precision(images: &[EvalImage], num_classes: usize) -> Result<ApReport> {
    for im in images {
        if im.targets.labels.iter().chain(im.detections.iter().map(|d| &d.label)).any(|&l| l >= num_classes) {
            return Err(Error::Contract(format!("label outside {num_classes} classes")));
        }
        if im.width == 0 || im.height == 0 {
            return Err(Error::Shape("evaluation image without a size".into()));
        }
    }
    let th = coco_iou_thresholds();
    let (ap, per_t, per_class) = ap_for_area(images, num_classes, &th, AREA_ALL);
    let ranged = |a| ap_for_area(images, num_classes, &th, a).0;
    Ok(ApReport {
        ap: ap.unwrap_or(0.0),
        ap50: per_t[0].unwrap_or(0.0),
        ap75: per_t[5].unwrap_or(0.0),
        ap_small: ranged(AREA_SMALL),
        ap_medium: ranged(AREA_MEDIUM),
        ap_large: ranged(AREA_LARGE),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, label: usize, bbox: [f64; 4]) -> Detection {
        Detection { score, label, bbox, query: 0 }
    }

    fn img(boxes: Vec<[f64; 4]>, labels: Vec<usize>, detections: Vec<Detection>) -> EvalImage {
        EvalImage {
            width: 100,
            height: 100,
            targets: ImageTargets { boxes, labels },
            detections,
        }
    }

    #[test]
    fn perfect_predictions() {
        let b = [[0.2, 0.2, 0.1, 0.1], [0.6, 0.5, 0.2, 0.3]];
        let images = vec![img(b.to_vec(), vec![0, 1], vec![det(1.0, 0, b[0]), det(1.0, 1, b[1])])];
        let r = average_precision(&images, 2).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_large, None);
    }

    #[test]
    fn no_predictions() {
        let images = vec![img(vec![[0.5, 0.5, 0.1, 0.1]], vec![0], vec![])];
        let r = average_precision(&images, 1).unwrap();
        assert_eq!((r.ap, r.ap50), (0.0, 0.0));
    }

    #[test]
    fn hand_traced_false_positive_fixture() {
        // image A: g1, g2; image B: g3. Ranked: 0.95 TP(g1), 0.9 FP, 0.8 TP(g3).
        // recall 1/3, 1/3, 2/3; precision 1, 1/2, 2/3 → envelope 1, 2/3, 2/3.
        // thresholds 0..=0.33 read 1 (34 points), 0.34..=0.66 read 2/3 (33 points).
        let g = [[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2]];
        let images = vec![
            img(vec![g[0], g[1]], vec![0, 0], vec![det(0.95, 0, g[0]), det(0.9, 0, [0.4, 0.8, 0.05, 0.05])]),
            img(vec![g[2]], vec![0], vec![det(0.8, 0, g[2])]),
        ];
        let r = average_precision(&images, 1).unwrap();
        assert!((r.ap50 - 56.0 / 101.0).abs() < 1e-6, "{}", r.ap50);
        assert!((r.ap - 56.0 / 101.0).abs() < 1e-6);
    }

    #[test]
    fn partial_overlap_counts_at_low_thresholds_only() {
        // IoU of 62/100: matched at 0.50, 0.55, 0.60 only. Class 1 has no gt and is excluded.
        let gt = [0.5, 0.5, 0.4, 0.25];
        let shifted = [0.5 + 0.4 * (38.0 / 162.0), 0.5, 0.4, 0.25];
        let iou = crate::boxes::iou(gt, shifted);
        assert!((iou - 0.62).abs() < 1e-9, "{iou}");
        let images = vec![img(vec![gt], vec![0], vec![det(0.7, 0, shifted), det(0.9, 1, gt)])];
        let r = average_precision(&images, 2).unwrap();
        assert!((r.ap50 - 1.0).abs() < 1e-6);
        assert!(r.ap75.abs() < 1e-6);
        assert!((r.ap - 0.3).abs() < 1e-6);
        assert_eq!(r.per_class[1], None);
        assert!(r.ap <= r.ap50);
    }

    #[test]
    fn area_ranges_use_native_pixels() {
        // 40×40 px gt on a 100×100 image is medium
        let b = [0.5, 0.5, 0.4, 0.4];
        let images = vec![img(vec![b], vec![0], vec![det(0.5, 0, b)])];
        let r = average_precision(&images, 1).unwrap();
        assert_eq!(r.ap_small, None);
        assert_eq!(r.ap_medium, Some(1.0));
    }
}
