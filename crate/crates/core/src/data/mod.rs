//! Canonical data model: boxes, classes, annotated scene images, and the
//! dataset-level operations (ingestion, splitting, augmentation, cropping)
//! that feed both the detector and the anomaly classifier.

mod augment;
mod image;
mod manifest;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::augment::{crop, flip_horizontal, rescale, RESCALE_RANGE};
pub use self::image::Image;
pub use self::manifest::{load_dataset, write_dataset, ManifestAnnotation, ManifestRecord};
pub use self::split::{stratified_split, DatasetSplit};

/// Axis-aligned box in continuous pixel coordinates.
///
/// Boxes are half-open: a box covering pixel columns `0..10` has
/// `x_min = 0`, `x_max = 10` and width 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box and checks the invariants (finite, non-negative, positive extent).
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn validate(&self) -> Result<()> {
        let coords = self.to_array();
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("box {coords:?} has non-finite coordinates")));
        }
        if coords.iter().any(|&c| c < 0.0) {
            return Err(Error::Validation(format!("box {coords:?} has negative coordinates")));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Validation(format!(
                "box {coords:?} violates x_min < x_max and y_min < y_max"
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Clamps the box to `[0, width] x [0, height]`. The result may be degenerate.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    /// Mirror about the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> Self {
        Self {
            x_min: image_width - self.x_max,
            y_min: self.y_min,
            x_max: image_width - self.x_min,
            y_max: self.y_max,
        }
    }
}

/// The six object categories. Integer codes follow declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Bottle,
    Hairdryer,
    Iron,
    Toaster,
    Mobile,
    Laptop,
}

impl ObjectClass {
    pub const COUNT: usize = 6;
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Bottle,
        ObjectClass::Hairdryer,
        ObjectClass::Iron,
        ObjectClass::Toaster,
        ObjectClass::Mobile,
        ObjectClass::Laptop,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Bottle => "bottle",
            ObjectClass::Hairdryer => "hairdryer",
            ObjectClass::Iron => "iron",
            ObjectClass::Toaster => "toaster",
            ObjectClass::Mobile => "mobile",
            ObjectClass::Laptop => "laptop",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown object class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyLabel {
    Benign,
    Anomalous,
}

impl AnomalyLabel {
    pub fn from_flag(anomalous: bool) -> Self {
        if anomalous {
            AnomalyLabel::Anomalous
        } else {
            AnomalyLabel::Benign
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == AnomalyLabel::Anomalous
    }

    /// 0 for benign, 1 for anomalous.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AnomalyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyLabel::Benign => "benign",
            AnomalyLabel::Anomalous => "anomaly",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub object_class: ObjectClass,
    pub anomaly: AnomalyLabel,
}

/// One scene image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Ground-truth image-level label: anomalous iff any annotation is anomalous.
    pub fn image_label(&self) -> AnomalyLabel {
        AnomalyLabel::from_flag(self.annotations.iter().any(|a| a.anomaly.is_anomalous()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(Error::Validation(format!("record `{}` has an empty image", self.id)));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for a in &self.annotations {
            a.bbox.validate().map_err(|e| {
                Error::Validation(format!("record `{}`: {e}", self.id))
            })?;
            if a.bbox.x_max > w || a.bbox.y_max > h {
                return Err(Error::Validation(format!(
                    "record `{}`: box {:?} exceeds image bounds {w}x{h}",
                    self.id,
                    a.bbox.to_array()
                )));
            }
        }
        Ok(())
    }
}

/// Ordered collection of records, in manifest order.
pub type Dataset = Vec<ImageRecord>;
