//! Attention-map aggregation for the encoder layer and flat records of the
//! decoder's deformable sampling points.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::CrossTrace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major H×W.
    pub values: Vec<f64>,
}

/// Averages (N_h, HW, HW) attention over heads and then over the query axis,
/// giving the mean attention each key position receives.
pub fn aifi_attention_map(a: &Tensor, height: usize, width: usize) -> Result<AttentionMap> {
    let (heads, q, k) = a
        .dims3()
        .map_err(|_| Error::Shape(format!("attention must be (heads, HW, HW), got {:?}", a.dims())))?;
    if q != height * width || k != q || heads == 0 {
        return Err(Error::Shape(format!(
            "attention {:?} does not fit a {height}x{width} map",
            a.dims()
        )));
    }
    let v = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    // compensated sums, so a constant input comes back exactly
    let mut sum = vec![0f64; k];
    let mut comp = vec![0f64; k];
    for row in v.chunks(k) {
        for ((s, c), &r) in sum.iter_mut().zip(comp.iter_mut()).zip(row) {
            let t = *s + r;
            *c += if s.abs() >= r.abs() { (*s - t) + r } else { (r - t) + *s };
            *s = t;
        }
    }
    let count = (heads * q) as f64;
    let values = sum.iter().zip(&comp).map(|(s, c)| (s + c) / count).collect();
    Ok(AttentionMap { height, width, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub image_id: u64,
    pub query_id: usize,
    pub stage: usize,
    pub head: usize,
    pub level: usize,
    pub ref_x: f64,
    pub ref_y: f64,
    pub point_x: f64,
    pub point_y: f64,
    /// Head weight divided by the head count, so each (query, stage) sums to one.
    pub weight: f64,
}

/// One row per (image, stage, query, head, level, point). `traces[s]` is stage s+1.
pub fn export_sampling_records(traces: Option<&[CrossTrace]>, image_ids: &[u64]) -> Result<Vec<SamplingRecord>> {
    let traces = traces.ok_or(Error::TraceDisabled)?;
    let mut rows = Vec::new();
    for (s, t) in traces.iter().enumerate() {
        let (b, q, h, l, m) = t.weights.dims5()?;
        if image_ids.len() != b {
            return Err(Error::Shape(format!("{} image ids for a batch of {b}", image_ids.len())));
        }
        let refs = t.reference.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let locs = t.locations.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let w = t.weights.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for (i, &image_id) in image_ids.iter().enumerate() {
            for qi in 0..q {
                let r = (i * q + qi) * 2;
                for hi in 0..h {
                    for li in 0..l {
                        for mi in 0..m {
                            let flat = (((i * q + qi) * h + hi) * l + li) * m + mi;
                            rows.push(SamplingRecord {
                                image_id,
                                query_id: qi,
                                stage: s + 1,
                                head: hi,
                                level: li,
                                ref_x: refs[r],
                                ref_y: refs[r + 1],
                                point_x: locs[flat * 2],
                                point_y: locs[flat * 2 + 1],
                                weight: w[flat] / h as f64,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}
