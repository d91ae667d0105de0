//! JSON-lines manifest: one scene per line, images stored as 8-bit PNG.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, AnomalyLabel, BoundingBox, Dataset, Image, ImageRecord, ObjectClass};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<ManifestAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAnnotation {
    pub bbox: [f64; 4],
    pub class: ObjectClass,
    pub anomaly: bool,
}

impl From<&Annotation> for ManifestAnnotation {
    fn from(a: &Annotation) -> Self {
        Self {
            bbox: a.bbox.to_array(),
            class: a.object_class,
            anomaly: a.anomaly.is_anomalous(),
        }
    }
}

/// Resolves a dataset location to its manifest file: either the manifest
/// itself or a directory containing `manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and validates a dataset. Record order equals manifest order.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: manifest.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate record id `{}`",
                rec.id
            )));
        }
        out.push(load_record(root, &rec, line_no)?);
    }
    Ok(out)
}

fn load_record(root: &Path, rec: &ManifestRecord, line_no: usize) -> Result<ImageRecord> {
    let image_path = root.join(&rec.image);
    if !image_path.is_file() {
        return Err(Error::MissingImage {
            id: rec.id.clone(),
            path: image_path,
        });
    }
    let image = Image::load_png(&image_path)?;
    if image.width() != rec.width || image.height() != rec.height {
        return Err(Error::Validation(format!(
            "line {line_no}: record `{}` declares {}x{} but image is {}x{}",
            rec.id,
            rec.width,
            rec.height,
            image.width(),
            image.height()
        )));
    }
    let (w, h) = (rec.width as f64, rec.height as f64);
    let mut annotations = Vec::with_capacity(rec.annotations.len());
    for a in &rec.annotations {
        let raw = BoundingBox {
            x_min: a.bbox[0],
            y_min: a.bbox[1],
            x_max: a.bbox[2],
            y_max: a.bbox[3],
        };
        let bbox = raw.clip(w, h);
        bbox.validate().map_err(|e| {
            Error::Validation(format!(
                "line {line_no}: record `{}`: box {:?} after clipping: {e}",
                rec.id, a.bbox
            ))
        })?;
        annotations.push(Annotation {
            bbox,
            object_class: a.class,
            anomaly: AnomalyLabel::from_flag(a.anomaly),
        });
    }
    Ok(ImageRecord {
        id: rec.id.clone(),
        image,
        annotations,
    })
}

/// Writes `dataset` under `dir` as `images/<id>.png` plus `manifest.jsonl`.
/// Returns the manifest path.
pub fn write_dataset(dataset: &[ImageRecord], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Vec::new();
    for rec in dataset {
        let rel = format!("images/{}.png", rec.id);
        rec.image.save_png(&dir.join(&rel))?;
        let line = ManifestRecord {
            id: rec.id.clone(),
            image: rel,
            width: rec.width(),
            height: rec.height(),
            annotations: rec.annotations.iter().map(Into::into).collect(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, &manifest)?;
    Ok(path)
}
