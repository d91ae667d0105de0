use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::iou;
use crate::data::{BoundingBox, ImageRecord, ObjectClass};
use crate::detector::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU thresholds, strictly increasing, each in (0, 1].
    pub theta_set: Vec<f64>,
}

impl Default for EvalConfig {
    /// The COCO-style range 0.50:0.05:0.95.
    fn default() -> Self {
        Self {
            theta_set: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_set.is_empty() {
            return Err(Error::Config("theta_set must not be empty".into()));
        }
        if self.theta_set.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!(
                "theta_set values must lie in (0, 1]: {:?}",
                self.theta_set
            )));
        }
        if self.theta_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "theta_set must be strictly increasing: {:?}",
                self.theta_set
            )));
        }
        Ok(())
    }
}

/// Precision/recall bookkeeping for one ranked list of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    /// Match indicator per ranked detection.
    pub b: Vec<u8>,
    /// Cumulative true positives.
    pub t: Vec<u64>,
    /// Cumulative false positives.
    pub f: Vec<u64>,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    /// Number of positive (ground-truth) samples.
    pub n_p: usize,
    /// Set when `n_p == 0` and there are detections: recall is undefined and AP is 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub ap: f64,
    pub n_d: usize,
    pub theta: Option<f64>,
}

/// Greedy one-to-one matching for a single class of a single image.
///
/// `detections` must already be ranked. Each detection takes the unmatched
/// ground-truth box with the highest IoU (ties to the lower index); it counts
/// as a hit, and consumes that box, iff the IoU reaches `theta`.
pub fn match_detections(detections: &[BoundingBox], ground_truth: &[BoundingBox], theta: f64) -> Vec<u8> {
    let mut consumed = vec![false; ground_truth.len()];
    detections
        .iter()
        .map(|d| greedy_step(d, ground_truth, &mut consumed, theta))
        .collect()
}

fn greedy_step(det: &BoundingBox, gt: &[BoundingBox], consumed: &mut [bool], theta: f64) -> u8 {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt_box) in gt.iter().enumerate() {
        if consumed[g] {
            continue;
        }
        let v = iou(det, gt_box);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((g, v));
        }
    }
    match best {
        Some((g, v)) if v >= theta => {
            consumed[g] = true;
            1
        }
        _ => 0,
    }
}

/// Cumulative TP/FP counts and the precision/recall sequences.
pub fn accumulate(b: &[u8], n_p: usize) -> PRCurve {
    let n = b.len();
    let (mut t, mut f) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut p, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut tp, mut fp) = (0u64, 0u64);
    for &bi in b {
        let hit = u64::from(bi != 0);
        tp += hit;
        fp += 1 - hit;
        t.push(tp);
        f.push(fp);
        p.push(tp as f64 / (tp + fp) as f64);
        r.push(if n_p == 0 { 0.0 } else { tp as f64 / n_p as f64 });
    }
    PRCurve {
        b: b.to_vec(),
        t,
        f,
        p,
        r,
        n_p,
        degenerate: n_p == 0 && n > 0,
    }
}

/// Area under the precision/recall curve, `sum_i p_i * (r_i - r_{i-1})` with `r_0 = 0`.
pub fn average_precision(curve: &PRCurve) -> APResult {
    let ap = if curve.degenerate || curve.n_p == 0 {
        0.0
    } else {
        let mut prev_r = 0.0;
        let mut sum = 0.0;
        for (&p, &r) in curve.p.iter().zip(&curve.r) {
            sum += p * (r - prev_r);
            prev_r = r;
        }
        sum
    };
    APResult {
        ap,
        n_d: curve.b.len(),
        theta: None,
    }
}

/// Arithmetic mean of per-class APs; 0 for an empty slice.
pub fn mean_average_precision(per_class_aps: &[f64]) -> f64 {
    if per_class_aps.is_empty() {
        return 0.0;
    }
    per_class_aps.iter().sum::<f64>() / per_class_aps.len() as f64
}

/// Detections for one image; the sidecar and evaluation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    /// AP averaged over the threshold set.
    pub ap: f64,
    /// AP at IoU 0.5.
    pub ap50: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Classes with neither ground truth nor detections are absent here and
    /// listed in `excluded` instead.
    pub per_class: BTreeMap<ObjectClass, ClassAp>,
    pub map: f64,
    pub map50: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<ObjectClass>,
    pub counts: BTreeMap<ObjectClass, ClassCounts>,
    pub theta_set: Vec<f64>,
}

struct Ranked<'a> {
    score: f64,
    image: usize,
    bbox: &'a BoundingBox,
}

/// Per-class AP over the threshold set and mAP over the classes.
///
/// Detections of a class are pooled across images and ranked by descending
/// score; ties keep input order (image entry order, then position within the
/// entry). Each detection is matched only against its own image's boxes.
pub fn evaluate_detections(
    detections: &[ImageDetections],
    dataset: &[ImageRecord],
    config: &EvalConfig,
) -> Result<DetectionReport> {
    config.validate()?;
    let index: HashMap<&str, usize> =
        dataset.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();

    let mut gt: Vec<Vec<Vec<BoundingBox>>> = vec![vec![Vec::new(); dataset.len()]; ObjectClass::COUNT];
    for (i, rec) in dataset.iter().enumerate() {
        for a in &rec.annotations {
            gt[a.object_class.code()][i].push(a.bbox);
        }
    }

    let mut ranked: Vec<Vec<Ranked>> = (0..ObjectClass::COUNT).map(|_| Vec::new()).collect();
    for entry in detections {
        let &img = index
            .get(entry.id.as_str())
            .ok_or_else(|| Error::Validation(format!("detections reference unknown image id `{}`", entry.id)))?;
        for d in &entry.detections {
            ranked[d.object_class.code()].push(Ranked {
                score: d.score,
                image: img,
                bbox: &d.bbox,
            });
        }
    }
    for list in &mut ranked {
        // stable: equal scores keep insertion order
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
    }

    let mut per_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut excluded = Vec::new();
    for class in ObjectClass::ALL {
        let c = class.code();
        let n_p: usize = gt[c].iter().map(Vec::len).sum();
        let list = &ranked[c];
        counts.insert(
            class,
            ClassCounts {
                ground_truth: n_p,
                detections: list.len(),
            },
        );
        if n_p == 0 && list.is_empty() {
            excluded.push(class);
            continue;
        }
        let ap_at = |theta: f64| {
            let b = match_ranked(list, &gt[c], theta);
            average_precision(&accumulate(&b, n_p)).ap
        };
        let mut sum = 0.0;
        for &theta in &config.theta_set {
            sum += ap_at(theta);
        }
        per_class.insert(
            class,
            ClassAp {
                ap: sum / config.theta_set.len() as f64,
                ap50: ap_at(0.5),
            },
        );
    }

    let aps: Vec<f64> = per_class.values().map(|v| v.ap).collect();
    let ap50s: Vec<f64> = per_class.values().map(|v| v.ap50).collect();
    Ok(DetectionReport {
        map: mean_average_precision(&aps),
        map50: mean_average_precision(&ap50s),
        per_class,
        excluded,
        counts,
        theta_set: config.theta_set.clone(),
    })
}

fn match_ranked(list: &[Ranked], gt_per_image: &[Vec<BoundingBox>], theta: f64) -> Vec<u8> {
    let mut consumed: Vec<Vec<bool>> = gt_per_image.iter().map(|g| vec![false; g.len()]).collect();
    list.iter()
        .map(|d| greedy_step(d.bbox, &gt_per_image[d.image], &mut consumed[d.image], theta))
        .collect()
}
