//! Train and validation splits resolved from the run config.

use std::fmt;
use std::str::FromStr;

use crate::data::{generate_synthetic_scene, load_coco_annotations, resize_and_pad, CocoRecord, DetectionSample, SyntheticSceneConfig};
use crate::error::{Error, Result};

use super::config::{DatasetConfig, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val)"))),
        }
    }
}

enum Source {
    Synthetic { scene: SyntheticSceneConfig, offset: u64, len: usize },
    Coco(Vec<CocoRecord>),
}

/// A sample resized to the model input plus the side length, in native
/// pixels, of the square its normalized boxes refer to.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: DetectionSample,
    pub native_side: usize,
}

pub struct Split {
    pub name: SplitName,
    image_size: usize,
    source: Source,
}

impl Split {
    pub fn open(cfg: &RunConfig, name: SplitName) -> Result<Self> {
        let source = match &cfg.dataset {
            DatasetConfig::Synthetic { train_size, val_size, scene } => match name {
                SplitName::Train => Source::Synthetic { scene: scene.clone(), offset: 0, len: *train_size },
                SplitName::Val => Source::Synthetic {
                    scene: scene.clone(),
                    offset: *train_size as u64,
                    len: *val_size,
                },
            },
            DatasetConfig::Coco { train_annotations, val_annotations, strict } => {
                let path = match name {
                    SplitName::Train => train_annotations,
                    SplitName::Val => val_annotations,
                };
                let ds = load_coco_annotations(path, *strict)?;
                if ds.categories.len() != cfg.model.decoder.num_classes {
                    return Err(Error::Config(format!(
                        "{} has {} categories, decoder predicts {}",
                        path.display(),
                        ds.categories.len(),
                        cfg.model.decoder.num_classes
                    )));
                }
                Source::Coco(ds.records)
            }
        };
        Ok(Self {
            name,
            image_size: cfg.model.image_size,
            source,
        })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Synthetic { len, .. } => *len,
            Source::Coco(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<LoadedSample> {
        if index >= self.len() {
            return Err(Error::Contract(format!("sample {index} outside a split of {}", self.len())));
        }
        let raw = match &self.source {
            Source::Synthetic { scene, offset, .. } => generate_synthetic_scene(scene, offset + index as u64)?,
            Source::Coco(r) => r[index].load()?,
        };
        fit(raw, self.image_size)
    }
}

/// Resizes to the model input unless the sample already has that size.
pub fn fit(raw: DetectionSample, image_size: usize) -> Result<LoadedSample> {
    let native_side = raw.width.max(raw.height);
    let sample = if raw.width == image_size && raw.height == image_size {
        raw
    } else {
        resize_and_pad(&raw, image_size)?.sample
    };
    Ok(LoadedSample { sample, native_side })
}
