//! COCO-style detection JSON. Bad records are skipped and reported; strict
//! mode turns any report entry into an error.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::boxes::ImageTargets;
use crate::error::{Error, Result};

use super::DetectionSample;

/// An image with its converted annotations; pixels are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoRecord {
    pub image_id: u64,
    pub file_name: String,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub targets: ImageTargets,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoDataset {
    pub records: Vec<CocoRecord>,
    /// Original category ids and names, in contiguous-label order.
    pub categories: Vec<(u64, String)>,
    /// One line per rejected image or annotation.
    pub errors: Vec<String>,
}

impl CocoRecord {
    pub fn load(&self) -> Result<DetectionSample> {
        let img = image::open(&self.path)
            .map_err(|e| Error::Format(format!("{}: {e}", self.path.display())))?
            .to_rgb32f();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (w, h) != (self.width, self.height) {
            return Err(Error::Format(format!(
                "{} is {w}x{h}, annotations say {}x{}",
                self.path.display(),
                self.width,
                self.height
            )));
        }
        let n = w * h;
        let mut pixels = vec![0f32; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                pixels[c * n + i] = p.0[c];
            }
        }
        Ok(DetectionSample {
            id: self.image_id,
            width: w,
            height: h,
            pixels,
            targets: self.targets.clone(),
            padding: (0, 0),
        })
    }
}

fn uint(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

/// Reads the annotation file; image paths resolve against its directory.
pub fn load_coco_annotations(path: impl AsRef<Path>, strict: bool) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut errors = Vec::new();

    let list = |key: &str| -> Result<&Vec<Value>> {
        root.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format(format!("{}: missing `{key}` array", path.display())))
    };

    let mut cat_ids = BTreeMap::new();
    for c in list("categories")? {
        match uint(c, "id") {
            Some(id) => {
                let name = c.get("name").and_then(Value::as_str).unwrap_or("").to_string();
                if cat_ids.insert(id, name).is_some() {
                    errors.push(format!("category {id}: duplicate id"));
                }
            }
            None => errors.push(format!("category without an integer id: {c}")),
        }
    }
    let label_of: HashMap<u64, usize> = cat_ids.keys().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut images: Vec<CocoRecord> = Vec::new();
    let mut index = HashMap::new();
    let mut seen = HashSet::new();
    for im in list("images")? {
        let (Some(id), Some(file), Some(w), Some(h)) = (
            uint(im, "id"),
            im.get("file_name").and_then(Value::as_str),
            uint(im, "width"),
            uint(im, "height"),
        ) else {
            errors.push(format!("image record missing id/file_name/width/height: {im}"));
            continue;
        };
        if !seen.insert(id) {
            errors.push(format!("image {id}: duplicate id"));
            continue;
        }
        if w == 0 || h == 0 {
            errors.push(format!("image {id}: non-positive size {w}x{h}"));
            continue;
        }
        let file_path = base.join(file);
        if !file_path.is_file() {
            errors.push(format!("image {id}: file {} not found", file_path.display()));
            continue;
        }
        index.insert(id, images.len());
        images.push(CocoRecord {
            image_id: id,
            file_name: file.to_string(),
            path: file_path,
            width: w as usize,
            height: h as usize,
            targets: ImageTargets::default(),
        });
    }

    for (n, a) in list("annotations")?.iter().enumerate() {
        let bbox = a.get("bbox").and_then(Value::as_array).and_then(|b| {
            let v: Vec<f64> = b.iter().filter_map(Value::as_f64).collect();
            (v.len() == 4 && b.len() == 4).then(|| [v[0], v[1], v[2], v[3]])
        });
        let (Some(image_id), Some(cat), Some([x, y, w, h])) = (uint(a, "image_id"), uint(a, "category_id"), bbox) else {
            errors.push(format!("annotation #{n} missing image_id/category_id/bbox"));
            continue;
        };
        if w <= 0.0 || h <= 0.0 {
            errors.push(format!("annotation #{n}: non-positive size {w}x{h}"));
            continue;
        }
        let Some(&label) = label_of.get(&cat) else {
            errors.push(format!("annotation #{n}: unknown category {cat}"));
            continue;
        };
        let Some(&slot) = index.get(&image_id) else {
            errors.push(format!("annotation #{n}: image {image_id} unavailable"));
            continue;
        };
        let rec = &mut images[slot];
        let (iw, ih) = (rec.width as f64, rec.height as f64);
        // clip to the image before normalizing
        let (x0, y0) = (x.clamp(0.0, iw), y.clamp(0.0, ih));
        let (x1, y1) = ((x + w).clamp(0.0, iw), (y + h).clamp(0.0, ih));
        if x1 <= x0 || y1 <= y0 {
            errors.push(format!("annotation #{n}: box lies outside image {image_id}"));
            continue;
        }
        rec.targets
            .boxes
            .push([(x0 + x1) / 2.0 / iw, (y0 + y1) / 2.0 / ih, (x1 - x0) / iw, (y1 - y0) / ih]);
        rec.targets.labels.push(label);
    }

    if strict && !errors.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} rejected records: {}",
            path.display(),
            errors.len(),
            errors.join("; ")
        )));
    }
    Ok(CocoDataset {
        records: images,
        categories: cat_ids.into_iter().collect(),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, json: &str, files: &[(&str, u32, u32)]) -> PathBuf {
        for &(f, w, h) in files {
            image::RgbImage::new(w, h).save(dir.join(f)).unwrap();
        }
        let p = dir.join("ann.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn converts_pixel_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"images":[{"id":7,"file_name":"a.png","width":100,"height":200}],
                "annotations":[{"image_id":7,"category_id":12,"bbox":[10,20,30,40]}],
                "categories":[{"id":12,"name":"car"},{"id":3,"name":"person"}]}"#,
            &[("a.png", 100, 200)],
        );
        let d = load_coco_annotations(&p, true).unwrap();
        let b = d.records[0].targets.boxes[0];
        for (got, want) in b.iter().zip([0.25, 0.20, 0.30, 0.20]) {
            assert!((got - want).abs() < 1e-12);
        }
        // ids 3 and 12 map to 0 and 1
        assert_eq!(d.records[0].targets.labels, vec![1]);
        let s = d.records[0].load().unwrap();
        assert_eq!((s.width, s.height), (100, 200));
    }

    #[test]
    fn empty_annotations_are_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":8,"height":8}],"annotations":[],"categories":[]}"#,
            &[("a.png", 8, 8)],
        );
        let d = load_coco_annotations(&p, true).unwrap();
        assert!(d.records[0].targets.is_empty());
    }

    #[test]
    fn bad_records_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"images":[{"id":1,"file_name":"a.png","width":8,"height":8},
                          {"id":1,"file_name":"a.png","width":8,"height":8},
                          {"id":2,"file_name":"missing.png","width":8,"height":8}],
                "annotations":[{"image_id":1,"category_id":1,"bbox":[1,1,0,3]},
                               {"image_id":1,"bbox":[1,1,2,3]},
                               {"image_id":1,"category_id":1,"bbox":[1,1,2,3]}],
                "categories":[{"id":1}]}"#,
            &[("a.png", 8, 8)],
        );
        let d = load_coco_annotations(&p, false).unwrap();
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.records[0].targets.len(), 1);
        assert_eq!(d.errors.len(), 4, "{:?}", d.errors);
        assert!(matches!(load_coco_annotations(&p, true), Err(Error::Format(_))));
    }
}
