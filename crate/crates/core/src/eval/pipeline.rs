use serde::{Deserialize, Serialize};

use super::{classification_report, evaluate_detections, iou, DetectionReport, EvalConfig, ImageDetections, PipelineReport};
use crate::data::{crop, AnomalyLabel, Image, ImageRecord};
use crate::detector::{Detection, DetectorModel};
use crate::error::{Error, Result};

/// Anything that localises objects in a whole image.
pub trait ObjectDetector {
    fn detect(&self, record: &ImageRecord, score_threshold: f64, nms_threshold: f64) -> Vec<Detection>;
}

impl ObjectDetector for DetectorModel {
    fn detect(&self, record: &ImageRecord, score_threshold: f64, nms_threshold: f64) -> Vec<Detection> {
        DetectorModel::detect(self, record, score_threshold, nms_threshold)
    }
}

/// Anything that labels a fixed-size patch benign or anomalous.
pub trait CropClassifier {
    /// Expected patch size `(height, width)`.
    fn input_size(&self) -> (usize, usize);
    /// Label and probability of the anomalous class.
    fn classify(&self, patch: &Image) -> Result<(AnomalyLabel, f64)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Detector score cut-off for detection metrics.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Detections below this score are not passed on to the classifier.
    pub screening_threshold: f64,
    /// Minimum IoU for a detection to inherit a ground-truth anomaly label.
    pub match_iou: f64,
    pub pad_fraction: f64,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            screening_threshold: 0.5,
            match_iou: 0.5,
            pad_fraction: 0.1,
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.score_threshold) || !unit(self.nms_threshold) || !unit(self.screening_threshold) || !unit(self.match_iou) {
            return Err(Error::Config("pipeline thresholds must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.pad_fraction) {
            return Err(Error::Config("pad_fraction must lie in [0, 1]".into()));
        }
        self.eval.validate()
    }
}

/// A detection with its stage-two verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(flatten)]
    pub detection: Detection,
    #[serde(with = "anomaly_flag")]
    pub anomaly: AnomalyLabel,
    pub anomaly_score: f64,
}

mod anomaly_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::data::AnomalyLabel;

    pub fn serialize<S: Serializer>(a: &AnomalyLabel, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bool(a.is_anomalous())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<AnomalyLabel, D::Error> {
        Ok(AnomalyLabel::from_flag(bool::deserialize(d)?))
    }
}

/// One line of the detections sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedImage {
    pub id: String,
    pub detections: Vec<ScoredDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub detection: DetectionReport,
    pub classification: PipelineReport,
    pub images: Vec<ScreenedImage>,
}

/// Crops and classifies every detection scoring at least the screening threshold.
pub fn screen_detections(
    classifier: &dyn CropClassifier,
    record: &ImageRecord,
    detections: &[Detection],
    config: &PipelineConfig,
) -> Result<Vec<ScoredDetection>> {
    let size = classifier.input_size();
    detections
        .iter()
        .filter(|d| d.score >= config.screening_threshold)
        .map(|d| {
            let patch = crop(&record.image, &d.bbox, config.pad_fraction, size)?;
            let (anomaly, anomaly_score) = classifier.classify(&patch)?;
            Ok(ScoredDetection {
                detection: d.clone(),
                anomaly,
                anomaly_score,
            })
        })
        .collect()
}

/// Detect, crop and classify every test image. Screened detections take the
/// anomaly label of their best-overlapping ground-truth box when that IoU
/// reaches `match_iou`; the rest are left out of the classification report
/// but still count towards the detection metrics.
pub fn evaluate_pipeline(
    detector: &dyn ObjectDetector,
    classifier: &dyn CropClassifier,
    test: &[ImageRecord],
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    config.validate()?;
    let mut all = Vec::with_capacity(test.len());
    let mut images = Vec::with_capacity(test.len());
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for record in test {
        let dets = detector.detect(record, config.score_threshold, config.nms_threshold);
        let screened = screen_detections(classifier, record, &dets, config)?;
        for s in &screened {
            let best = record
                .annotations
                .iter()
                .map(|a| (iou(&a.bbox, &s.detection.bbox), a.anomaly))
                .fold(None, |acc: Option<(f64, AnomalyLabel)>, (v, l)| match acc {
                    Some((b, _)) if b >= v => acc,
                    _ => Some((v, l)),
                });
            if let Some((v, label)) = best {
                if v >= config.match_iou {
                    predicted.push(s.anomaly);
                    truth.push(label);
                }
            }
        }
        all.push(ImageDetections {
            id: record.id.clone(),
            detections: dets,
        });
        images.push(ScreenedImage {
            id: record.id.clone(),
            detections: screened,
        });
    }
    let detection = evaluate_detections(&all, test, &config.eval)?;
    let classification = if predicted.is_empty() {
        PipelineReport::empty()
    } else {
        classification_report(&predicted, &truth)?
    };
    Ok(PipelineOutput {
        detection,
        classification,
        images,
    })
}

/// Whole-image baseline: each test image is resized to the classifier input
/// and labelled anomalous iff it holds at least one anomalous object.
pub fn evaluate_full_image(classifier: &dyn CropClassifier, test: &[ImageRecord]) -> Result<PipelineReport> {
    let (h, w) = classifier.input_size();
    let mut predicted = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for record in test {
        let (label, _) = classifier.classify(&record.image.resize(h, w))?;
        predicted.push(label);
        truth.push(record.image_label());
    }
    if predicted.is_empty() {
        return Ok(PipelineReport::empty());
    }
    classification_report(&predicted, &truth)
}
