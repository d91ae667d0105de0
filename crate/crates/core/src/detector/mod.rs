//! Stage-one object localisation.
//!
//! Anchor machinery, target assignment, focal loss, ROI-Align and NMS are
//! exposed as free functions. [`DetectorModel`] wraps one of two networks
//! behind the same `detect` call: a single-stage anchor detector (the
//! `reference` and `retinanet` tags) and a two-stage proposal + ROI-Align
//! detector (`faster_rcnn` and `mask_rcnn`).

mod anchors;
mod assign;
mod boxcoder;
mod focal;
mod nms;
mod roi_align;
mod single_stage;
mod train;
mod trunk;
mod two_stage;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use self::anchors::{generate_anchors, AnchorConfig};
pub use self::assign::{assign_targets, AnchorLabel, AnchorTarget};
pub use self::boxcoder::{decode_box, encode_box};
pub use self::focal::{focal_loss, focal_loss_logits, FocalLoss, FOCAL_EPS};
pub use self::nms::nms;
pub use self::roi_align::{roi_align, roi_sampling, RoiSampling};
pub use self::train::{train_detector, DetectorTrainConfig, TrainingLog};
pub use self::trunk::BackboneConfig;

use self::single_stage::SingleStageNet;
use self::two_stage::TwoStageNet;
use crate::data::{BoundingBox, ImageRecord, ObjectClass};
use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized, Tensor};

pub const DETECTOR_VERSION: &str = "dualscreen-det-v1";

/// Largest reported score; keeps `score_threshold = 1.0` an empty filter.
pub const MAX_SCORE: f64 = 1.0 - FOCAL_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(with = "bbox_array")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub object_class: ObjectClass,
    pub score: f64,
}

mod bbox_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::data::BoundingBox;

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        BoundingBox::from_array(a).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Reference,
    FasterRcnn,
    MaskRcnn,
    Retinanet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Reference,
        Architecture::FasterRcnn,
        Architecture::MaskRcnn,
        Architecture::Retinanet,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Reference => "reference",
            Architecture::FasterRcnn => "faster_rcnn",
            Architecture::MaskRcnn => "mask_rcnn",
            Architecture::Retinanet => "retinanet",
        }
    }

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Reference => "Reference",
            Architecture::FasterRcnn => "Faster R-CNN",
            Architecture::MaskRcnn => "Mask R-CNN",
            Architecture::Retinanet => "RetinaNet",
        }
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, Architecture::FasterRcnn | Architecture::MaskRcnn)
    }

    /// Default (iou_neg, iou_pos) for anchor assignment.
    pub fn default_iou_thresholds(self) -> (f64, f64) {
        if self.is_two_stage() {
            (0.3, 0.7)
        } else {
            (0.4, 0.5)
        }
    }

    pub fn default_backbone(self) -> BackboneConfig {
        match self {
            Architecture::Reference | Architecture::FasterRcnn => BackboneConfig::default(),
            Architecture::MaskRcnn | Architecture::Retinanet => BackboneConfig {
                residual_blocks: 1,
                ..BackboneConfig::default()
            },
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected reference, faster_rcnn, mask_rcnn or retinanet)")))
    }
}

/// Per-channel affine input normalisation `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn apply(&self, image: &crate::data::Image) -> Tensor {
        let mut data = image.to_chw();
        let plane = image.height() * image.width();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Tensor::new(3, image.height(), image.width(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(crate) enum Network {
    SingleStage(SingleStageNet),
    TwoStage(TwoStageNet),
}

impl Parameterized for Network {
    fn params(&self) -> Vec<&Param> {
        match self {
            Network::SingleStage(n) => n.params(),
            Network::TwoStage(n) => n.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Network::SingleStage(n) => n.params_mut(),
            Network::TwoStage(n) => n.params_mut(),
        }
    }
}

/// Inference-time limits shared by both network kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceLimits {
    /// Candidates kept before class-wise NMS.
    pub pre_nms_top_k: usize,
    /// Detections returned per image.
    pub max_detections: usize,
}

impl Default for InferenceLimits {
    fn default() -> Self {
        Self {
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// A trained (or freshly initialised) detector with everything needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub version: String,
    pub architecture: Architecture,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub normalization: Normalization,
    pub limits: InferenceLimits,
    pub seed: u64,
    pub(crate) network: Network,
}

impl DetectorModel {
    /// Randomly initialised model for the given architecture.
    pub fn new(architecture: Architecture, backbone: BackboneConfig, anchors: AnchorConfig, seed: u64) -> Result<Self> {
        anchors.validate()?;
        backbone.validate()?;
        if anchors.stride != backbone.stride() {
            return Err(Error::Config(format!(
                "anchor stride {} must equal the backbone stride {}",
                anchors.stride,
                backbone.stride()
            )));
        }
        let mut rng = crate::nn::rng(seed, 1);
        let network = if architecture.is_two_stage() {
            let samples = if architecture == Architecture::MaskRcnn { 2 } else { 1 };
            Network::TwoStage(TwoStageNet::new(&backbone, samples, &mut rng))
        } else {
            Network::SingleStage(SingleStageNet::new(&backbone, &mut rng))
        };
        Ok(Self {
            version: DETECTOR_VERSION.into(),
            architecture,
            backbone,
            anchors,
            normalization: Normalization::default(),
            limits: InferenceLimits::default(),
            seed,
            network,
        })
    }

    pub fn num_params(&self) -> usize {
        self.network.num_params()
    }

    /// Short label for the "network configuration" column of reports.
    pub fn network_label(&self) -> String {
        self.backbone.label()
    }

    /// Runs the network on one image: decodes every anchor or proposal, drops
    /// scores below `score_threshold`, clips to the image, applies per-class
    /// NMS and returns detections sorted by descending score.
    pub fn detect(&self, record: &ImageRecord, score_threshold: f64, nms_threshold: f64) -> Vec<Detection> {
        let input = self.normalization.apply(&record.image);
        let size = (record.width() as f64, record.height() as f64);
        let candidates = match &self.network {
            Network::SingleStage(n) => n.candidates(input, &self.anchors, size, score_threshold),
            Network::TwoStage(n) => n.candidates(input, &self.anchors, size, score_threshold),
        };
        self.finish(candidates, nms_threshold)
    }

    fn finish(&self, mut candidates: Vec<Detection>, nms_threshold: f64) -> Vec<Detection> {
        let order = nms::rank_by_score(&candidates, |d| d.score);
        let mut ranked: Vec<Detection> = order
            .into_iter()
            .take(self.limits.pre_nms_top_k)
            .map(|i| std::mem::replace(&mut candidates[i], placeholder()))
            .collect();
        ranked = nms(&ranked, nms_threshold);
        ranked.truncate(self.limits.max_detections);
        ranked
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: serde_json::Value = crate::io::read_json(path)?;
        match raw.get("version").and_then(|v| v.as_str()) {
            Some(DETECTOR_VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: expected version {DETECTOR_VERSION}, found {other:?}",
                    path.display()
                )))
            }
        }
        let mut model: DetectorModel = serde_json::from_value(raw)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        model.network.zero_grad();
        Ok(model)
    }
}

fn placeholder() -> Detection {
    Detection {
        bbox: BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        },
        object_class: ObjectClass::Bottle,
        score: 0.0,
    }
}

/// Builds a detection from a decoded box, or nothing if clipping leaves no area.
pub(crate) fn clipped_detection(bbox: BoundingBox, (w, h): (f64, f64), class: ObjectClass, score: f64) -> Option<Detection> {
    let b = bbox.clip(w, h);
    if !(b.is_valid() && b.width() > 1e-6 && b.height() > 1e-6) {
        return None;
    }
    Some(Detection {
        bbox: b,
        object_class: class,
        score: score.clamp(0.0, MAX_SCORE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn record() -> ImageRecord {
        let mut img = Image::filled(64, 64, [0.2, 0.3, 0.4]);
        for y in 10..30 {
            for x in 12..40 {
                img.set_pixel(y, x, [0.9, 0.1, 0.1]);
            }
        }
        ImageRecord {
            id: "t".into(),
            image: img,
            annotations: vec![],
        }
    }

    #[test]
    fn architecture_tags_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.tag()));
        }
        assert!("yolo".parse::<Architecture>().is_err());
    }

    #[test]
    fn initialised_models_detect_within_contract() {
        for a in Architecture::ALL {
            let model = DetectorModel::new(a, a.default_backbone(), AnchorConfig::default(), 3).unwrap();
            let r = record();
            let d1 = model.detect(&r, 0.0, 0.5);
            let d2 = model.detect(&r, 0.0, 0.5);
            assert_eq!(d1, d2);
            assert!(!d1.is_empty());
            for w in d1.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for d in &d1 {
                assert!(d.bbox.is_valid());
                assert!(d.bbox.x_max <= 64.0 && d.bbox.y_max <= 64.0);
                assert!((0.0..=1.0).contains(&d.score));
            }
            assert!(model.detect(&r, 1.0, 0.5).is_empty());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        let model = DetectorModel::new(Architecture::FasterRcnn, BackboneConfig::default(), AnchorConfig::default(), 5).unwrap();
        model.save(&path).unwrap();
        let back = DetectorModel::load(&path).unwrap();
        assert_eq!(back.detect(&record(), 0.0, 0.5), model.detect(&record(), 0.0, 0.5));
        std::fs::write(&path, r#"{"version": "other"}"#).unwrap();
        assert!(matches!(DetectorModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_anchor_stride_is_rejected() {
        let anchors = AnchorConfig {
            stride: 16,
            ..AnchorConfig::default()
        };
        assert!(DetectorModel::new(Architecture::Reference, BackboneConfig::default(), anchors, 0).is_err());
    }
}
