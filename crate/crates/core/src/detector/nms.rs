use super::Detection;
use crate::eval::iou;

/// Indices of `dets` in score order, highest first; equal scores keep input order.
pub(crate) fn rank_by_score<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])));
    order
}

/// Greedy per-class non-maximum suppression. A detection survives iff its IoU
/// with every already-kept detection of the same class is at most
/// `iou_threshold`. Output is sorted by score, highest first.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank_by_score(detections, |d| d.score) {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.object_class == d.object_class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// Class-agnostic suppression over plain boxes, returning kept indices.
pub(crate) fn nms_indices(boxes: &[crate::data::BoundingBox], order: &[usize], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
