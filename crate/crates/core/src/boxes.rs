//! Box conversions and overlap measures, on host values and on tensors.

use candle_core::Tensor;

use crate::error::Result;

/// Normalized (cx, cy, w, h).
pub type BoxCxcywh = [f64; 4];

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ImageTargets {
    pub boxes: Vec<BoxCxcywh>,
    pub labels: Vec<usize>,
}

impl ImageTargets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn cxcywh_to_xyxy(b: BoxCxcywh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> BoxCxcywh {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU of two xyxy boxes; zero when the union is empty.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

/// Generalized IoU in (-1, 1].
pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Elementwise GIoU of two (N, 4) cxcywh tensors, differentiable in both.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let c = t.narrow(1, 0, 2)?;
        let half = (t.narrow(1, 2, 2)? * 0.5)?;
        let lo = (&c - &half)?;
        let hi = (&c + &half)?;
        Ok((lo.narrow(1, 0, 1)?, lo.narrow(1, 1, 1)?, hi.narrow(1, 0, 1)?, hi.narrow(1, 1, 1)?))
    };
    let (ax0, ay0, ax1, ay1) = corners(a)?;
    let (bx0, by0, bx1, by1) = corners(b)?;
    let area_a = ((&ax1 - &ax0)? * (&ay1 - &ay0)?)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hw = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let hh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let hull = (hw * hh)?;
    let eps = 1e-12;
    let iou = (inter / (&union + eps)?)?;
    let penalty = ((&hull - &union)? / (&hull + eps)?)?;
    Ok((iou - penalty)?.squeeze(1)?)
}
