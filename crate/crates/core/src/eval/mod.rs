//! Accuracy metrics, stage diagnostics and analysis exports.

pub mod ap;
pub mod attention;
pub mod fading;

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::Serialize;

use crate::error::{Error, Result};

pub use ap::{average_precision, ApReport, EvalImage};
pub use attention::{aifi_attention_map, export_sampling_records, AttentionMap, SamplingRecord};
pub use fading::{
    fading_reports, fp_exacerbation_rate, stage_matchings, tp_fading_rate, FadingReport, FlagTable, QueryFlag,
    StageImagePredictions, SCORE_FLOOR,
};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One header row from the field names, then one row per record.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Little-endian f64 `.npy` array of shape (H, W).
pub fn write_attention_npy(path: &Path, map: &AttentionMap) -> Result<()> {
    ensure_parent(path)?;
    let t = Tensor::from_vec(map.values.clone(), (map.height, map.width), &Device::Cpu)?;
    t.write_npy(path)?;
    Ok(())
}
