//! Detection and screening metrics.
//!
//! Detection: IoU, greedy score-ordered matching at each IoU threshold,
//! cumulative TP/FP counts, precision/recall, AP as `sum p_i * (r_i - r_{i-1})`
//! and mAP as the mean over classes. Screening: accuracy, precision, recall,
//! F1 and TP/FP rates with "anomalous" as the positive class.

mod classification;
mod detection;
mod pipeline;
mod render;

pub use self::classification::{classification_report, ConfusionCounts, PipelineReport};
pub use self::detection::{
    accumulate, average_precision, evaluate_detections, match_detections, mean_average_precision,
    APResult, ClassAp, ClassCounts, DetectionReport, EvalConfig, ImageDetections, PRCurve,
};
pub use self::pipeline::{
    evaluate_full_image, evaluate_pipeline, screen_detections, CropClassifier, ObjectDetector,
    PipelineConfig, PipelineOutput, ScoredDetection, ScreenedImage,
};
pub use self::render::{render_detection_table, render_pipeline_table, EvaluationDocument, TableRow};

use crate::data::BoundingBox;

/// Intersection over union of two boxes; 0 when they are disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
