//! End-to-end acceptance checks, one line per criterion.
//!
//! Run everything with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- 1 4 9`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualscreen::classifier::{
    crops_from_records, full_image_samples, train_classifier, Backbone, ClassifierModel, ClassifierTrainConfig,
    FilterBankConfig,
};
use dualscreen::cli::RunConfig;
use dualscreen::data::{
    load_dataset, stratified_split, AnomalyLabel, Annotation, BoundingBox, Image, ImageRecord, ObjectClass,
};
use dualscreen::detector::{
    decode_box, encode_box, focal_loss, focal_loss_logits, generate_anchors, nms, train_detector, AnchorConfig,
    Architecture, Detection, DetectorModel, DetectorTrainConfig,
};
use dualscreen::eval::{
    accumulate, average_precision, classification_report, evaluate_detections, evaluate_full_image,
    evaluate_pipeline, iou, match_detections, mean_average_precision, render_detection_table,
    render_pipeline_table, ClassAp, ConfusionCounts, CropClassifier, DetectionReport, EvalConfig, ImageDetections,
    ObjectDetector, PipelineConfig, PipelineReport, TableRow,
};
use dualscreen::synth::{generate_dataset, generate_scene, SceneConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bb(a: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(a).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. evaluate_detections against exhaustive matching

/// IoU by counting unit cells of integer-aligned boxes.
fn cell_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let cells = |x: &BoundingBox| {
        let mut v = Vec::new();
        for y in x.y_min as i64..x.y_max as i64 {
            for xx in x.x_min as i64..x.x_max as i64 {
                v.push((y, xx));
            }
        }
        v
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    let union = ca.len() + cb.len() - inter;
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ordering key of one detection's assignment: matched beats unmatched, then
/// higher IoU, then the lower ground-truth index.
fn assignment_key(choice: Option<(usize, f64)>) -> (u8, f64, i64) {
    match choice {
        Some((g, v)) => (1, v, -(g as i64)),
        None => (0, 0.0, 0),
    }
}

/// Enumerates every one-to-one assignment of ranked detections to ground truth
/// of their own image with IoU >= theta, and keeps the one whose per-detection
/// keys are lexicographically largest in rank order.
fn exhaustive_match(ranked: &[(usize, BoundingBox)], gt: &[Vec<BoundingBox>], theta: f64) -> Vec<u8> {
    fn walk(
        i: usize,
        ranked: &[(usize, BoundingBox)],
        gt: &[Vec<BoundingBox>],
        theta: f64,
        used: &mut Vec<Vec<bool>>,
        current: &mut Vec<Option<(usize, f64)>>,
        best: &mut Option<Vec<Option<(usize, f64)>>>,
    ) {
        if i == ranked.len() {
            let better = match best {
                None => true,
                Some(b) => {
                    let lhs: Vec<_> = current.iter().map(|c| assignment_key(*c)).collect();
                    let rhs: Vec<_> = b.iter().map(|c| assignment_key(*c)).collect();
                    lhs.partial_cmp(&rhs) == Some(std::cmp::Ordering::Greater)
                }
            };
            if better {
                *best = Some(current.clone());
            }
            return;
        }
        let (img, det) = ranked[i];
        current.push(None);
        walk(i + 1, ranked, gt, theta, used, current, best);
        current.pop();
        for g in 0..gt[img].len() {
            if used[img][g] {
                continue;
            }
            let v = cell_iou(&det, &gt[img][g]);
            if v < theta {
                continue;
            }
            used[img][g] = true;
            current.push(Some((g, v)));
            walk(i + 1, ranked, gt, theta, used, current, best);
            current.pop();
            used[img][g] = false;
        }
    }
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut best = None;
    walk(0, ranked, gt, theta, &mut used, &mut Vec::new(), &mut best);
    best.unwrap().iter().map(|c| u8::from(c.is_some())).collect()
}

/// Area under the precision/recall curve, recomputing every prefix count.
fn oracle_ap(b: &[u8], n_p: usize) -> f64 {
    if n_p == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut prev_r = 0.0;
    for i in 0..b.len() {
        let t = b[..=i].iter().filter(|&&x| x == 1).count();
        let p = t as f64 / (i + 1) as f64;
        let r = t as f64 / n_p as f64;
        sum += p * (r - prev_r);
        prev_r = r;
    }
    sum
}

struct Instance {
    records: Vec<ImageRecord>,
    detections: Vec<ImageDetections>,
}

fn random_box(r: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (r.gen_range(0..10) as f64, r.gen_range(0..10) as f64);
    let (w, h) = (r.gen_range(1..7) as f64, r.gen_range(1..7) as f64);
    [x, y, x + w, y + h]
}

fn random_instance(r: &mut ChaCha8Rng) -> Instance {
    let n_images = r.gen_range(1..=3);
    let classes: Vec<ObjectClass> = (0..r.gen_range(1..=2)).map(|_| ObjectClass::ALL[r.gen_range(0..6)]).collect();
    let mut records = Vec::new();
    let mut detections = Vec::new();
    for i in 0..n_images {
        let mut annotations = Vec::new();
        for &class in &classes {
            for _ in 0..r.gen_range(0..=3) {
                annotations.push(Annotation {
                    bbox: bb(random_box(r)),
                    object_class: class,
                    anomaly: AnomalyLabel::Benign,
                });
            }
        }
        let mut dets = Vec::new();
        for _ in 0..r.gen_range(0..=4) {
            let class = classes[r.gen_range(0..classes.len())];
            let own: Vec<&Annotation> = annotations.iter().filter(|a| a.object_class == class).collect();
            let bbox = if !own.is_empty() && r.gen_bool(0.7) {
                let a = own[r.gen_range(0..own.len())].bbox.to_array();
                let j = |r: &mut ChaCha8Rng| r.gen_range(-1..=1) as f64;
                let (x0, y0) = ((a[0] + j(r)).max(0.0), (a[1] + j(r)).max(0.0));
                let (x1, y1) = ((a[2] + j(r)).max(x0 + 1.0), (a[3] + j(r)).max(y0 + 1.0));
                [x0, y0, x1, y1]
            } else {
                random_box(r)
            };
            dets.push(Detection {
                bbox: bb(bbox),
                object_class: class,
                score: r.gen_range(1..=5) as f64 / 5.0,
            });
        }
        records.push(ImageRecord {
            id: format!("img{i}"),
            image: Image::filled(20, 20, [0.5; 3]),
            annotations,
        });
        detections.push(ImageDetections {
            id: format!("img{i}"),
            detections: dets,
        });
    }
    Instance { records, detections }
}

/// Replays the full metric on one instance without touching the library's
/// matching or accumulation code.
fn oracle_report(inst: &Instance, thetas: &[f64]) -> (BTreeMap<ObjectClass, ClassAp>, f64, f64) {
    let mut per_class = BTreeMap::new();
    for class in ObjectClass::ALL {
        let gt: Vec<Vec<BoundingBox>> = inst
            .records
            .iter()
            .map(|r| r.annotations.iter().filter(|a| a.object_class == class).map(|a| a.bbox).collect())
            .collect();
        let n_p: usize = gt.iter().map(Vec::len).sum();
        let mut pooled: Vec<(f64, usize, BoundingBox)> = Vec::new();
        for (img, entry) in inst.detections.iter().enumerate() {
            for d in entry.detections.iter().filter(|d| d.object_class == class) {
                pooled.push((d.score, img, d.bbox));
            }
        }
        if n_p == 0 && pooled.is_empty() {
            continue;
        }
        // insertion sort keeps equal scores in input order
        let mut ranked: Vec<(f64, usize, BoundingBox)> = Vec::new();
        for item in pooled {
            let pos = ranked.iter().position(|r| r.0 < item.0).unwrap_or(ranked.len());
            ranked.insert(pos, item);
        }
        let ranked: Vec<(usize, BoundingBox)> = ranked.into_iter().map(|(_, i, b)| (i, b)).collect();
        let ap_at = |theta: f64| oracle_ap(&exhaustive_match(&ranked, &gt, theta), n_p);
        let mut sum = 0.0;
        for &t in thetas {
            sum += ap_at(t);
        }
        per_class.insert(
            class,
            ClassAp {
                ap: sum / thetas.len() as f64,
                ap50: ap_at(0.5),
            },
        );
    }
    let n = per_class.len().max(1) as f64;
    let map = per_class.values().map(|v| v.ap).fold(0.0, |a, b| a + b) / n;
    let map50 = per_class.values().map(|v| v.ap50).fold(0.0, |a, b| a + b) / n;
    (per_class, map, map50)
}

fn metric_oracle() -> Check {
    let thetas: Vec<f64> = (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect();
    let config = EvalConfig::default();
    ensure(config.theta_set == thetas, || format!("default thresholds {:?}", config.theta_set))?;
    let mut r = rng(1);
    let cases = 2000;
    let mut nontrivial = 0;
    for case in 0..cases {
        let inst = random_instance(&mut r);
        let report = evaluate_detections(&inst.detections, &inst.records, &config).map_err(|e| e.to_string())?;
        let (per_class, map, map50) = oracle_report(&inst, &thetas);
        ensure(report.per_class == per_class, || {
            format!("case {case}: per-class APs {:?} vs oracle {:?}", report.per_class, per_class)
        })?;
        ensure(report.map == map && report.map50 == map50, || {
            format!("case {case}: mAP {} / {} vs oracle {map} / {map50}", report.map, report.map50)
        })?;
        if per_class.values().any(|v| v.ap > 0.0 && v.ap < 1.0) {
            nontrivial += 1;
        }
    }
    Ok(format!("{cases} instances identical to exhaustive matching ({nontrivial} with fractional AP)"))
}

// ---------------------------------------------------------------------------
// 2. metric fixtures

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// IoU by counting half-pixel cell centres.
fn subpixel_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inside = |x: f64, y: f64, r: [f64; 4]| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for yi in 0..80 {
        for xi in 0..80 {
            let (x, y) = (xi as f64 * 0.5 + 0.25, yi as f64 * 0.5 + 0.25);
            let (ia, ib) = (inside(x, y, a), inside(x, y, b));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

struct EchoDetector;

impl ObjectDetector for EchoDetector {
    fn detect(&self, record: &ImageRecord, score_threshold: f64, _nms: f64) -> Vec<Detection> {
        let score = 0.9;
        if score < score_threshold {
            return Vec::new();
        }
        record
            .annotations
            .iter()
            .map(|a| Detection {
                bbox: a.bbox,
                object_class: a.object_class,
                score,
            })
            .collect()
    }
}

/// Labels a patch anomalous when most of it is dark.
struct DarkPatchClassifier;

impl CropClassifier for DarkPatchClassifier {
    fn input_size(&self) -> (usize, usize) {
        (8, 8)
    }

    fn classify(&self, patch: &Image) -> dualscreen::Result<(AnomalyLabel, f64)> {
        let mean = patch.data().iter().map(|&v| f64::from(v)).sum::<f64>() / patch.data().len() as f64;
        let score = 1.0 - mean;
        Ok((AnomalyLabel::from_flag(score >= 0.5), score))
    }
}

fn painted_scene(id: &str, objects: &[([f64; 4], bool)]) -> ImageRecord {
    let mut image = Image::filled(40, 40, [0.5; 3]);
    let mut annotations = Vec::new();
    for (i, &(b, anomalous)) in objects.iter().enumerate() {
        let colour = if anomalous { [0.0; 3] } else { [1.0; 3] };
        for y in b[1] as usize..b[3] as usize {
            for x in b[0] as usize..b[2] as usize {
                image.set_pixel(y, x, colour);
            }
        }
        annotations.push(Annotation {
            bbox: bb(b),
            object_class: ObjectClass::ALL[i % 6],
            anomaly: AnomalyLabel::from_flag(anomalous),
        });
    }
    ImageRecord {
        id: id.into(),
        image,
        annotations,
    }
}

fn metric_fixtures() -> Check {
    let mut checked = 0;
    let mut check = |ok: bool, what: &str| -> Result<(), String> {
        checked += 1;
        ensure(ok, || format!("fixture failed: {what}"))
    };

    // IoU
    let a = bb([1.5, 2.0, 7.25, 9.0]);
    check(iou(&a, &a) == 1.0, "identical boxes")?;
    check(iou(&bb([0.0, 0.0, 10.0, 10.0]), &bb([20.0, 20.0, 30.0, 30.0])) == 0.0, "disjoint boxes")?;
    let third = iou(&bb([0.0, 0.0, 10.0, 10.0]), &bb([5.0, 0.0, 15.0, 10.0]));
    check(close(third, 1.0 / 3.0), "half-overlap IoU is 1/3")?;
    check(close(third, subpixel_iou([0.0, 0.0, 10.0, 10.0], [5.0, 0.0, 15.0, 10.0])), "IoU vs sub-pixel grid")?;

    // matching
    let g = bb([0.0, 0.0, 10.0, 10.0]);
    check(match_detections(&[g], &[g], 0.5) == [1], "perfect match")?;
    let near = bb([0.0, 0.0, 10.0, 9.0]);
    check(close(iou(&near, &g), 0.9), "near box IoU 0.9")?;
    check(match_detections(&[near, near], &[g], 0.5) == [1, 0], "duplicate is a false positive")?;
    check(match_detections(&[g, g, g], &[], 0.5) == [0, 0, 0], "empty ground truth")?;

    // accumulation and AP
    let c = accumulate(&[1], 1);
    check(c.t == [1] && c.f == [0] && c.p == [1.0] && c.r == [1.0], "single TP curve")?;
    check(average_precision(&c).ap == 1.0, "perfect AP")?;
    let c = accumulate(&[1, 0, 1], 2);
    check(c.t == [1, 1, 2] && c.f == [0, 1, 1], "cumulative counts")?;
    check(c.p[0] == 1.0 && c.p[1] == 0.5 && close(c.p[2], 2.0 / 3.0), "precision sequence")?;
    check(c.r == [0.5, 0.5, 1.0], "recall sequence")?;
    let ap = average_precision(&c).ap;
    check(close(ap, 1.0 * 0.5 + 0.5 * 0.0 + (2.0 / 3.0) * 0.5), "AP term by term")?;
    check(close(ap, 5.0 / 6.0), "AP is 5/6")?;
    let c = accumulate(&[0, 0], 3);
    check(c.p == [0.0, 0.0] && c.r == [0.0, 0.0], "all-FP curve")?;
    check(average_precision(&c).ap == 0.0, "all-FP AP")?;
    check(accumulate(&[0, 1], 0).degenerate, "no positives is degenerate")?;
    check(average_precision(&accumulate(&[0, 1], 0)).ap == 0.0, "degenerate AP is 0")?;
    check(close(mean_average_precision(&[0.8, 0.6]), 0.7), "mAP of two classes")?;
    check(close(mean_average_precision(&[0.37; 6]), 0.37), "constant mAP")?;

    // whole-dataset evaluation
    let records = vec![
        painted_scene("a", &[([2.0, 2.0, 12.0, 12.0], false), ([20.0, 20.0, 34.0, 30.0], true)]),
        painted_scene("b", &[([5.0, 5.0, 25.0, 15.0], true)]),
    ];
    let echo: Vec<ImageDetections> = records
        .iter()
        .map(|r| ImageDetections {
            id: r.id.clone(),
            detections: EchoDetector.detect(r, 0.0, 0.5),
        })
        .collect();
    let rep = evaluate_detections(&echo, &records, &EvalConfig::default()).map_err(|e| e.to_string())?;
    check(rep.map == 1.0 && rep.per_class.values().all(|v| v.ap == 1.0), "ground-truth echo scores 1")?;
    let empty: Vec<ImageDetections> = Vec::new();
    let rep = evaluate_detections(&empty, &records, &EvalConfig::default()).map_err(|e| e.to_string())?;
    check(rep.map == 0.0, "no detections scores 0")?;
    let stray = vec![ImageDetections {
        id: "nope".into(),
        detections: vec![],
    }];
    check(evaluate_detections(&stray, &records, &EvalConfig::default()).is_err(), "unknown image id")?;

    // screening metrics
    let perfect = classification_report(
        &[AnomalyLabel::Anomalous, AnomalyLabel::Benign],
        &[AnomalyLabel::Anomalous, AnomalyLabel::Benign],
    )
    .map_err(|e| e.to_string())?;
    check(
        perfect.accuracy == Some(1.0)
            && perfect.precision == Some(1.0)
            && perfect.recall == Some(1.0)
            && perfect.f1 == Some(1.0)
            && perfect.fp_pct == Some(0.0),
        "perfect screening",
    )?;
    let r = PipelineReport::from_counts(ConfusionCounts {
        tp: 3,
        fp: 1,
        fn_: 2,
        tn: 4,
    });
    let some_close = |v: Option<f64>, x: f64| v.is_some_and(|v| close(v, x));
    check(some_close(r.accuracy, 0.7) && some_close(r.precision, 0.75) && some_close(r.recall, 0.6), "A/P/R")?;
    check(some_close(r.f1, 2.0 * 0.75 * 0.6 / 1.35) && some_close(r.f1, 2.0 / 3.0), "F1")?;
    check(some_close(r.tp_pct, 60.0) && some_close(r.fp_pct, 20.0), "TP% and FP%")?;
    check(classification_report(&[], &[]).is_err(), "empty input")?;

    // composed pipeline
    let cfg = PipelineConfig::default();
    let out = evaluate_pipeline(&EchoDetector, &DarkPatchClassifier, &records, &cfg).map_err(|e| e.to_string())?;
    check(out.classification.accuracy == Some(1.0), "perfect detector and classifier")?;
    check(out.classification.counts.total() == 3, "every object screened")?;
    let strict = PipelineConfig {
        score_threshold: 1.0,
        ..cfg
    };
    let out = evaluate_pipeline(&EchoDetector, &DarkPatchClassifier, &records, &strict).map_err(|e| e.to_string())?;
    check(out.classification.degenerate && out.classification.accuracy.is_none(), "no detections is degenerate")?;

    Ok(format!("{checked} fixtures exact (cross-path tolerance 1e-12)"))
}

// ---------------------------------------------------------------------------
// 3. gradients

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn focal_instance(r: &mut ChaCha8Rng) -> f64 {
    let k = r.gen_range(2..7);
    let n = r.gen_range(1..6);
    let logits: Vec<f64> = (0..n * k).map(|_| r.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let gamma = r.gen_range(0.0..5.0);
    let alpha = r.gen_range(0.05..=1.0);
    let norm = r.gen_range(0.5..4.0);
    let loss = |z: &[f64]| focal_loss_logits(z, k, &labels, 0, gamma, alpha, norm).unwrap().loss;
    let grad = focal_loss_logits(&logits, k, &labels, 0, gamma, alpha, norm).unwrap().grad;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let (mut zp, mut zm) = (logits.clone(), logits.clone());
        zp[i] += eps;
        zm[i] -= eps;
        worst = worst.max(rel_err((loss(&zp) - loss(&zm)) / (2.0 * eps), grad[i]));
    }

    // probability form: only each row's true entry carries gradient
    let probs: Vec<f64> = (0..n * k).map(|_| r.gen_range(0.01..0.99)).collect();
    let loss = |p: &[f64]| focal_loss(p, k, &labels, 0, gamma, alpha).unwrap().loss;
    let grad = focal_loss(&probs, k, &labels, 0, gamma, alpha).unwrap().grad;
    for i in 0..probs.len() {
        let (mut pp, mut pm) = (probs.clone(), probs.clone());
        pp[i] += eps;
        pm[i] -= eps;
        worst = worst.max(rel_err((loss(&pp) - loss(&pm)) / (2.0 * eps), grad[i]));
    }
    worst
}

fn classifier_instance(seed: u64) -> Result<f64, String> {
    let mut r = rng(1000 + seed);
    let backbone = Backbone::ALL[r.gen_range(0..3)];
    let bank = FilterBankConfig {
        filters_per_class: r.gen_range(1..4),
        aux_weight: r.gen_range(0.0..1.0),
        ..FilterBankConfig::default()
    };
    let side = [16, 24][r.gen_range(0..2)];
    let mut model = ClassifierModel::new(backbone, Some(bank), (side, side), seed).map_err(|e| e.to_string())?;
    // The bank's head columns start at zero; jitter everything so every path
    // carries gradient.
    let values: Vec<f64> = model.parameters().iter().map(|v| v + r.gen_range(-0.05..0.05)).collect();
    model.set_parameters(&values).map_err(|e| e.to_string())?;
    let data: Vec<f32> = (0..side * side * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    let patch = Image::new(side, side, data).map_err(|e| e.to_string())?;
    let label = AnomalyLabel::from_flag(r.gen_bool(0.5));
    let (_, grad) = model.loss_gradient(&patch, label).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..12 {
        let i = r.gen_range(0..values.len());
        let mut v = values.clone();
        v[i] = values[i] + eps;
        probe.set_parameters(&v).unwrap();
        let lp = probe.loss_gradient(&patch, label).unwrap().0;
        v[i] = values[i] - eps;
        probe.set_parameters(&v).unwrap();
        let lm = probe.loss_gradient(&patch, label).unwrap().0;
        worst = worst.max(rel_err((lp - lm) / (2.0 * eps), grad[i]));
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let mut r = rng(3);
    let focal = (0..100).map(|_| focal_instance(&mut r)).fold(0.0, f64::max);
    let mut cls: f64 = 0.0;
    for seed in 0..100 {
        cls = cls.max(classifier_instance(seed)?);
    }
    ensure(focal <= 1e-4 && cls <= 1e-4, || {
        format!("worst relative error: focal {focal:.2e}, classifier {cls:.2e} (limit 1e-4)")
    })?;
    Ok(format!(
        "100 focal + 100 classifier instances, worst relative error {focal:.1e} / {cls:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. geometry

fn float_box(r: &mut ChaCha8Rng) -> BoundingBox {
    let (x, y) = (r.gen_range(0.0..100.0), r.gen_range(0.0..100.0));
    bb([x, y, x + r.gen_range(0.5..60.0), y + r.gen_range(0.5..60.0)])
}

fn geometry_properties() -> Check {
    const N: usize = 10_000;
    let mut r = rng(4);
    for i in 0..N {
        let (a, b) = (float_box(&mut r), float_box(&mut r));
        let v = iou(&a, &b);
        ensure(v == iou(&b, &a) && (0.0..=1.0).contains(&v), || format!("iou symmetry/range, case {i}"))?;
        ensure(iou(&a, &a) == 1.0, || format!("iou identity, case {i}"))?;
        let (dx, dy) = (r.gen_range(-100.0..100.0), r.gen_range(-100.0..100.0));
        let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
        ensure((moved - v).abs() <= 1e-9, || format!("iou translation, case {i}: {v} vs {moved}"))?;
    }
    for i in 0..N {
        let (anchor, gt) = (float_box(&mut r), float_box(&mut r));
        let back = decode_box(&anchor, encode_box(&anchor, &gt)).to_array();
        let err = back.iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-6, || format!("encode/decode round trip error {err:e}, case {i}"))?;
    }
    for i in 0..N {
        let dets: Vec<Detection> = (0..r.gen_range(0..12))
            .map(|_| Detection {
                bbox: float_box(&mut r),
                object_class: ObjectClass::ALL[r.gen_range(0..3)],
                score: r.gen_range(0..10) as f64 / 10.0,
            })
            .collect();
        let t = r.gen_range(0.0..1.0);
        let once = nms(&dets, t);
        ensure(nms(&once, t) == once, || format!("nms idempotence, case {i}"))?;
    }
    for i in 0..N {
        let cfg = AnchorConfig {
            scales: [r.gen_range(4.0..80.0), r.gen_range(4.0..80.0), r.gen_range(4.0..80.0)],
            aspect_ratios: [r.gen_range(0.2..5.0), r.gen_range(0.2..5.0), r.gen_range(0.2..5.0)],
            stride: r.gen_range(1..33),
        };
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
        let anchors = generate_anchors((rows, cols), &cfg);
        ensure(anchors.len() == rows * cols * AnchorConfig::PER_LOCATION, || format!("anchor count, case {i}"))?;
        for (k, a) in anchors.iter().enumerate() {
            let s = cfg.scales[(k / 3) % 3];
            let ratio = cfg.aspect_ratios[k % 3];
            let loc = k / 9;
            let (cx, cy) = a.center();
            let stride = cfg.stride as f64;
            let ok = (a.area() - s * s).abs() <= 1e-9 * s * s
                && (a.height() / a.width() - ratio).abs() <= 1e-9 * ratio
                && (cx - ((loc % cols) as f64 + 0.5) * stride).abs() <= 1e-9
                && (cy - ((loc / cols) as f64 + 0.5) * stride).abs() <= 1e-9;
            ensure(ok, || format!("anchor {k} shape/position, case {i}: {a:?}"))?;
        }
    }
    Ok(format!("{N} cases each: IoU, box coding, NMS, anchors"))
}

// ---------------------------------------------------------------------------
// 5-7. training runs

fn overfit_sanity() -> Check {
    let scene = SceneConfig {
        seed: 17,
        ..SceneConfig::default()
    };
    let images: Vec<ImageRecord> = (0..10).map(|i| generate_scene(&scene, i).unwrap()).collect();
    let cfg = DetectorTrainConfig {
        architecture: Architecture::Reference,
        iterations: 1500,
        base_lr: 0.01,
        batch_size: 2,
        eval_interval: 1500,
        // Memorising ten scenes is the point here.
        flip_prob: 0.0,
        scale_range: [1.0, 1.0],
        seed: 17,
        ..DetectorTrainConfig::default()
    };
    let t = Instant::now();
    let (model, _) = train_detector(&images, &[], &cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let report = detect_and_score(&model, &images)?;
    ensure(report.map50 >= 0.9 && elapsed <= Duration::from_secs(15 * 60), || {
        format!("mAP@0.5 {:.3} after {:.0}s (need >= 0.9 within 15 min)", report.map50, elapsed.as_secs_f64())
    })?;
    Ok(format!("mAP@0.5 {:.3} on the 10 training scenes, {:.0}s", report.map50, elapsed.as_secs_f64()))
}

fn detect_and_score(model: &DetectorModel, records: &[ImageRecord]) -> Result<DetectionReport, String> {
    let p = PipelineConfig::default();
    let dets: Vec<ImageDetections> = records
        .iter()
        .map(|r| ImageDetections {
            id: r.id.clone(),
            detections: model.detect(r, p.score_threshold, p.nms_threshold),
        })
        .collect();
    evaluate_detections(&dets, records, &p.eval).map_err(|e| e.to_string())
}

/// The benchmark preset's data and split, produced the way the CLI does.
struct Benchmark {
    config: RunConfig,
    train: Vec<ImageRecord>,
    val: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
    detector: Option<DetectorModel>,
}

fn benchmark_data() -> Result<Benchmark, String> {
    let config = RunConfig::load(None, &["--preset".into(), "benchmark".into()]).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate_dataset(&config.scene, config.gen.count, dir.path()).map_err(|e| e.to_string())?;
    let dataset = load_dataset(dir.path()).map_err(|e| e.to_string())?;
    let split = stratified_split(&dataset, config.split.ratios, config.split.seed).map_err(|e| e.to_string())?;
    let pick = |ids: &[String]| -> Vec<ImageRecord> {
        ids.iter().map(|id| dataset.iter().find(|r| &r.id == id).unwrap().clone()).collect()
    };
    Ok(Benchmark {
        train: pick(&split.train),
        val: pick(&split.validation),
        test: pick(&split.test),
        config,
        detector: None,
    })
}

fn desk_benchmark(bench: &mut Benchmark) -> Check {
    let sizes = (bench.train.len(), bench.val.len(), bench.test.len());
    ensure(sizes == (500, 150, 150), || format!("split sizes {sizes:?}"))?;
    let t = Instant::now();
    let (model, _) = train_detector(&bench.train, &bench.val, &bench.config.detector).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let report = detect_and_score(&model, &bench.test)?;
    bench.detector = Some(model);
    let summary = format!(
        "test mAP@0.5 {:.3}, range mAP {:.3}, trained in {:.1} min",
        report.map50,
        report.map,
        elapsed.as_secs_f64() / 60.0
    );
    ensure(
        report.map50 >= 0.80 && report.map >= 0.50 && elapsed <= Duration::from_secs(60 * 60),
        || format!("{summary} (need >= 0.80 / >= 0.50 within 60 min)"),
    )?;
    Ok(summary)
}

fn dual_vs_full(bench: &Benchmark) -> Check {
    let detector = bench.detector.as_ref().ok_or("benchmark detector was not trained")?;
    let cfg = &bench.config.classifier;
    let size = (cfg.input_size[0], cfg.input_size[1]);
    let pad = bench.config.pipeline.pad_fraction;
    let err = |e: dualscreen::Error| e.to_string();
    let train_crops = crops_from_records(&bench.train, pad, size).map_err(err)?;
    let val_crops = crops_from_records(&bench.val, pad, size).map_err(err)?;

    let screen = |fine: bool| -> Result<(PipelineReport, usize), String> {
        let c = ClassifierTrainConfig {
            fine_grained: fine,
            ..cfg.clone()
        };
        let (model, log) = train_classifier(&train_crops, &val_crops, &c).map_err(err)?;
        let report = evaluate_pipeline(detector, &model, &bench.test, &bench.config.pipeline).map_err(err)?;
        Ok((report.classification, log.best_epoch))
    };
    let (base, _) = screen(false)?;
    // Epoch 0 of a warm-started bank reproduces the base outputs exactly.
    let (fine, fine_epoch) = screen(true)?;
    let (full_model, _) = train_classifier(
        &full_image_samples(&bench.train, size),
        &full_image_samples(&bench.val, size),
        &ClassifierTrainConfig {
            fine_grained: false,
            ..cfg.clone()
        },
    )
    .map_err(err)?;
    let full = evaluate_full_image(&full_model, &bench.test).map_err(err)?;

    let get = |v: Option<f64>, what: &str| v.ok_or_else(|| format!("{what} undefined"));
    let (dual_a, full_a) = (get(base.accuracy, "dual accuracy")?, get(full.accuracy, "full-image accuracy")?);
    let (base_f1, fine_f1) = (get(base.f1, "base F1")?, get(fine.f1, "fine-grained F1")?);
    let summary = format!(
        "dual A {dual_a:.3} vs full-image A {full_a:.3} ({:+.1} pts); F1 base {base_f1:.3}, fine-grained {fine_f1:.3} (best epoch {fine_epoch})",
        100.0 * (dual_a - full_a)
    );
    ensure(dual_a - full_a >= 0.05 && base_f1 - fine_f1 <= 0.01, || {
        format!("{summary} (need >= +5 pts and an F1 drop <= 1 pt)")
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. determinism

fn recipe_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (data, out) = (tmp.path().join("data"), tmp.path().join("runs"));
    let run = |cmd: &str| -> Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_dualscreen"))
            .args([cmd, "--preset", "smoke", "--pipeline.screening_threshold", "0.0"])
            .arg("--data.dir")
            .arg(&data)
            .arg("--output.dir")
            .arg(&out)
            .env("RUST_LOG", "error")
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("`{cmd}` exited with {status}"))
    };
    let recipe = || -> Result<Vec<Vec<u8>>, String> {
        for cmd in ["gen", "split", "train-detector", "train-classifier", "eval-detector", "eval-pipeline"] {
            run(cmd)?;
        }
        ["eval-detector/report.json", "eval-pipeline/report.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    let first = recipe()?;
    let second = recipe()?;
    ensure(first == second, || "report JSON differs between identical runs".into())?;
    Ok(format!(
        "smoke recipe twice: {} + {} report bytes identical",
        first[0].len(),
        first[1].len()
    ))
}

// ---------------------------------------------------------------------------
// 9. table format

fn cells(line: &str) -> Vec<&str> {
    line.split("  ").map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn report_fidelity() -> Check {
    let aps = [0.994, 0.922, 1.0, 1.0, 0.965, 0.996];
    let per_class: BTreeMap<ObjectClass, ClassAp> =
        ObjectClass::ALL.iter().zip(aps).map(|(&c, ap)| (c, ClassAp { ap, ap50: ap })).collect();
    let det = DetectionReport {
        per_class,
        map: 0.979,
        map50: 0.979,
        excluded: vec![],
        counts: BTreeMap::new(),
        theta_set: vec![0.5],
    };
    let table = render_detection_table(&[(TableRow::new("", "Mask R-CNN", "ResNet101"), &det)], false);
    let lines: Vec<&str> = table.lines().collect();
    ensure(
        cells(lines[0])
            == ["Model", "Network configuration", "Bottle", "Hairdryer", "Iron", "Toaster", "Mobile", "Laptop", "mAP"],
        || format!("detection header: {}", lines[0]),
    )?;
    ensure(
        cells(lines[2]) == ["Mask R-CNN", "ResNet101", "99.4", "92.2", "100.0", "100.0", "96.5", "99.6", "97.9"],
        || format!("detection row: {}", lines[2]),
    )?;

    let row = PipelineReport {
        accuracy: Some(0.66),
        precision: Some(0.67),
        recall: Some(0.59),
        f1: Some(0.63),
        tp_pct: Some(59.25),
        fp_pct: Some(27.67),
        counts: ConfusionCounts::default(),
        degenerate: false,
    };
    let table = render_pipeline_table(&[(
        TableRow::new("Dual CNN (pre-localization)", "Classification via CNN", "ResNet50"),
        &row,
    )]);
    let lines: Vec<&str> = table.lines().collect();
    ensure(
        cells(lines[0]) == ["Object Detection", "Model", "Network configuration", "A", "P", "R", "F1", "TP(%)", "FP(%)"],
        || format!("screening header: {}", lines[0]),
    )?;
    ensure(
        cells(lines[2])
            == [
                "Dual CNN (pre-localization)",
                "Classification via CNN",
                "ResNet50",
                "0.66",
                "0.67",
                "0.59",
                "0.63",
                "59.25",
                "27.67",
            ],
        || format!("screening row: {}", lines[2]),
    )?;

    // The JSON report carries the same quantities under stable keys.
    let json = serde_json::to_value(&row).map_err(|e| e.to_string())?;
    for key in ["A", "P", "R", "F1", "TP_pct", "FP_pct", "counts"] {
        ensure(json.get(key).is_some(), || format!("classification JSON lacks `{key}`: {json}"))?;
    }
    let json = serde_json::to_value(&det).map_err(|e| e.to_string())?;
    ensure(json["per_class"]["bottle"]["ap"] == 0.994 && json.get("map").is_some(), || {
        format!("detection JSON shape: {json}")
    })?;
    Ok("AP table (six class APs + mAP) and anomaly table (A/P/R/F1/TP%/FP%) rows reproduced".into())
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let names = [
        "metric oracle equivalence",
        "metric fixtures",
        "gradient checks",
        "geometry properties",
        "overfit sanity",
        "desk-scale benchmark",
        "dual vs full-image",
        "determinism",
        "report fidelity",
    ];
    let mut bench: Option<Benchmark> = None;
    let mut failed = 0;
    for n in 1..=9u32 {
        if !selected(n) {
            continue;
        }
        let t = Instant::now();
        let result = guarded(|| match n {
            1 => metric_oracle(),
            2 => metric_fixtures(),
            3 => gradient_checks(),
            4 => geometry_properties(),
            5 => overfit_sanity(),
            6 | 7 => {
                if bench.is_none() {
                    bench = Some(benchmark_data()?);
                }
                let b = bench.as_mut().unwrap();
                if n == 7 && b.detector.is_none() {
                    desk_benchmark(b)?;
                }
                if n == 6 {
                    desk_benchmark(b)
                } else {
                    dual_vs_full(b)
                }
            }
            8 => recipe_determinism(),
            9 => report_fidelity(),
            _ => unreachable!(),
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({}): PASS [{secs:.1}s] {detail}", names[n as usize - 1]),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({}): FAIL [{secs:.1}s] {detail}", names[n as usize - 1]);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
