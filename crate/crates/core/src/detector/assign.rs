use crate::data::{Annotation, BoundingBox, ObjectClass};
use crate::error::{Error, Result};
use crate::eval::iou;

use super::boxcoder::encode_box;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { class: ObjectClass, gt_index: usize },
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// IoU with the best-matching ground-truth box (0 when there is none).
    pub max_iou: f64,
    /// Encoded offsets to the assigned box; present for positives only.
    pub regression: Option<[f64; 4]>,
}

impl AnchorTarget {
    pub fn is_positive(&self) -> bool {
        matches!(self.label, AnchorLabel::Positive { .. })
    }
}

/// Labels every anchor positive, negative or ignored by its best IoU with the
/// ground truth, then forces each ground-truth box's best anchor positive.
pub fn assign_targets(
    anchors: &[BoundingBox],
    ground_truth: &[Annotation],
    iou_neg: f64,
    iou_pos: f64,
) -> Result<Vec<AnchorTarget>> {
    if !(0.0..=1.0).contains(&iou_neg) || !(0.0..=1.0).contains(&iou_pos) || iou_neg > iou_pos {
        return Err(Error::InvalidArgument(format!(
            "assignment thresholds must satisfy 0 <= iou_neg <= iou_pos <= 1, got {iou_neg} and {iou_pos}"
        )));
    }
    let boxes: Vec<BoundingBox> = ground_truth.iter().map(|a| a.bbox).collect();
    Ok(assign_boxes(anchors, &boxes, iou_neg, iou_pos)
        .into_iter()
        .zip(anchors)
        .map(|((label, max_iou), anchor)| match label {
            Some(g) if g.1 => AnchorTarget {
                label: AnchorLabel::Positive {
                    class: ground_truth[g.0].object_class,
                    gt_index: g.0,
                },
                max_iou,
                regression: Some(encode_box(anchor, &boxes[g.0])),
            },
            Some(_) => AnchorTarget {
                label: AnchorLabel::Ignore,
                max_iou,
                regression: None,
            },
            None => AnchorTarget {
                label: AnchorLabel::Negative,
                max_iou,
                regression: None,
            },
        })
        .collect())
}

/// Core of the assignment, shared with proposal labelling. For each anchor
/// returns `(Some((gt, positive)), max_iou)` when not negative; `positive ==
/// false` means ignored.
pub(crate) fn assign_boxes(
    anchors: &[BoundingBox],
    gt: &[BoundingBox],
    iou_neg: f64,
    iou_pos: f64,
) -> Vec<(Option<(usize, bool)>, f64)> {
    if gt.is_empty() {
        return vec![(None, 0.0); anchors.len()];
    }
    let mut best_anchor = vec![(usize::MAX, 0.0f64); gt.len()];
    let mut out = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (gi, v);
            }
            if v > best_anchor[gi].1 {
                best_anchor[gi] = (ai, v);
            }
        }
        let (gi, v) = best;
        let entry = if v >= iou_pos {
            Some((gi, true))
        } else if v < iou_neg {
            None
        } else {
            Some((gi, false))
        };
        out.push((entry, v));
    }
    for (gi, &(ai, v)) in best_anchor.iter().enumerate() {
        if ai == usize::MAX {
            continue;
        }
        // An anchor that is the best for several boxes keeps the one it
        // overlaps most; equal overlaps keep the lower box index.
        let keep_existing = matches!(out[ai].0, Some((g, true)) if g != gi && iou(&anchors[ai], &gt[g]) >= v);
        if !keep_existing {
            out[ai].0 = Some((gi, true));
        }
    }
    out
}
