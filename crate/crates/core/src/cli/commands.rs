use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use super::config::{CropSource, RunConfig, SplitPart};
use super::draw::annotate;
use crate::classifier::{crops_from_records, full_image_samples, train_classifier, ClassifierModel, CropSample};
use crate::data::{crop, load_dataset, stratified_split, DatasetSplit, Image, ImageRecord};
use crate::detector::{train_detector, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_detections, evaluate_full_image, evaluate_pipeline, iou, render_detection_table, render_pipeline_table,
    screen_detections, EvaluationDocument, ImageDetections, ScreenedImage, TableRow,
};
use crate::io::{read_json, write_atomic, write_json};
use crate::synth::generate_dataset;

#[derive(Debug, Serialize)]
struct Artifact {
    kind: &'static str,
    path: PathBuf,
}

/// Bookkeeping shared by every command: the archived resolved config, the
/// list of produced files, and wall-clock metadata kept apart from reports.
struct RunRecord {
    dir: PathBuf,
    command: &'static str,
    artifacts: Vec<Artifact>,
    started: SystemTime,
    clock: Instant,
}

impl RunRecord {
    fn begin(config: &RunConfig, dir: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rec = Self {
            dir: dir.to_path_buf(),
            command,
            artifacts: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        };
        let path = dir.join(format!("{command}.config.toml"));
        write_atomic(&path, config.to_flat_toml()?.as_bytes())?;
        rec.add("resolved_config", path);
        Ok(rec)
    }

    fn add(&mut self, kind: &'static str, path: PathBuf) {
        self.artifacts.push(Artifact { kind, path });
    }

    fn finish(mut self) -> Result<()> {
        let meta = self.dir.join(format!("{}.meta.json", self.command));
        let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        write_json(
            &meta,
            &json!({
                "command": self.command,
                "version": env!("CARGO_PKG_VERSION"),
                "started_unix": unix(self.started),
                "finished_unix": unix(SystemTime::now()),
                "elapsed_secs": self.clock.elapsed().as_secs_f64(),
            }),
        )?;
        self.add("metadata", meta);
        let manifest = self.dir.join(format!("{}.artifacts.json", self.command));
        write_json(&manifest, &json!({ "command": self.command, "artifacts": self.artifacts }))?;
        for a in &self.artifacts {
            log::info!("wrote {} ({})", a.path.display(), a.kind);
        }
        Ok(())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{what} checkpoint {} not found", path.display())))
    }
}

fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    let path = config.split_file();
    if !path.is_file() {
        return Err(Error::Validation(format!(
            "split file {} not found; run `dualscreen split` first",
            path.display()
        )));
    }
    read_json(&path)
}

/// Records of one split part, in dataset order.
fn part(dataset: &[ImageRecord], split: Option<&DatasetSplit>, which: SplitPart) -> Vec<ImageRecord> {
    let ids = match (which, split) {
        (SplitPart::All, _) | (_, None) => return dataset.to_vec(),
        (SplitPart::Train, Some(s)) => &s.train,
        (SplitPart::Validation, Some(s)) => &s.validation,
        (SplitPart::Test, Some(s)) => &s.test,
    };
    split.expect("matched above").select(dataset, ids).into_iter().cloned().collect()
}

fn load_part(config: &RunConfig, which: SplitPart) -> Result<Vec<ImageRecord>> {
    let dataset = load_dataset(&config.data.dir)?;
    let split = match which {
        SplitPart::All => None,
        _ => Some(load_split(config)?),
    };
    Ok(part(&dataset, split.as_ref(), which))
}

pub fn gen(config: &RunConfig) -> Result<()> {
    let dir = &config.data.dir;
    let mut rec = RunRecord::begin(config, dir, "gen")?;
    let manifest = generate_dataset(&config.scene, config.gen.count, dir)?;
    rec.add("manifest", manifest);
    rec.add("generation", dir.join("generation.json"));
    rec.finish()
}

pub fn split(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(&config.data.dir)?;
    let mut rec = RunRecord::begin(config, &config.output.dir, "split")?;
    let split = stratified_split(&dataset, config.split.ratios, config.split.seed)?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "split {} images into {} / {} / {}",
        dataset.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let path = config.split_file();
    write_json(&path, &split)?;
    rec.add("split", path);
    rec.finish()
}

pub fn train_detector_cmd(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(&config.data.dir)?;
    let split = load_split(config)?;
    let train = part(&dataset, Some(&split), SplitPart::Train);
    let val = part(&dataset, Some(&split), SplitPart::Validation);
    let mut rec = RunRecord::begin(config, &config.output.dir, "train-detector")?;
    let (model, log) = train_detector(&train, &val, &config.detector)?;
    let path = config.detector_checkpoint();
    model.save(&path)?;
    rec.add("detector_checkpoint", path);
    let log_path = config.output.dir.join("detector_training.json");
    write_json(&log_path, &log)?;
    rec.add("training_log", log_path);
    rec.finish()
}

/// Crops around detections, each labelled by the best-overlapping annotation;
/// detections matching nothing are dropped.
fn detected_crops(detector: &DetectorModel, records: &[ImageRecord], config: &RunConfig) -> Result<Vec<CropSample>> {
    let p = &config.pipeline;
    let size = (config.classifier.input_size[0], config.classifier.input_size[1]);
    let mut out = Vec::new();
    for r in records {
        for d in detector.detect(r, p.screening_threshold, p.nms_threshold) {
            let best = r
                .annotations
                .iter()
                .map(|a| (iou(&d.bbox, &a.bbox), a))
                .filter(|(o, _)| *o >= p.match_iou)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, a)) = best {
                out.push(CropSample {
                    patch: crop(&r.image, &d.bbox, p.pad_fraction, size)?,
                    label: a.anomaly,
                    source_class: Some(a.object_class),
                    source_image_id: r.id.clone(),
                });
            }
        }
    }
    Ok(out)
}

pub fn train_classifier_cmd(config: &RunConfig) -> Result<()> {
    let detector = match config.crops.source {
        CropSource::GroundTruth => None,
        CropSource::Detections => {
            let path = config.detector_checkpoint();
            require_file(&path, "detector")?;
            Some(DetectorModel::load(&path)?)
        }
    };
    let dataset = load_dataset(&config.data.dir)?;
    let split = load_split(config)?;
    let train = part(&dataset, Some(&split), SplitPart::Train);
    let val = part(&dataset, Some(&split), SplitPart::Validation);
    let mut rec = RunRecord::begin(config, &config.output.dir, "train-classifier")?;
    let size = (config.classifier.input_size[0], config.classifier.input_size[1]);
    let (train_crops, val_crops) = match &detector {
        None => (
            crops_from_records(&train, config.pipeline.pad_fraction, size)?,
            crops_from_records(&val, config.pipeline.pad_fraction, size)?,
        ),
        Some(d) => (detected_crops(d, &train, config)?, detected_crops(d, &val, config)?),
    };
    log::info!("training crop classifier on {} crops", train_crops.len());
    let (model, log) = train_classifier(&train_crops, &val_crops, &config.classifier)?;
    let path = config.classifier_checkpoint();
    model.save(&path)?;
    rec.add("classifier_checkpoint", path);
    let log_path = config.output.dir.join("classifier_training.json");
    write_json(&log_path, &log)?;
    rec.add("training_log", log_path);

    if config.crops.full_image_baseline {
        let cfg = crate::classifier::ClassifierTrainConfig {
            fine_grained: false,
            ..config.classifier.clone()
        };
        log::info!("training whole-image baseline on {} images", train.len());
        let (model, log) = train_classifier(&full_image_samples(&train, size), &full_image_samples(&val, size), &cfg)?;
        let path = config.full_image_checkpoint();
        model.save(&path)?;
        rec.add("full_image_checkpoint", path);
        let log_path = config.output.dir.join("full_image_training.json");
        write_json(&log_path, &log)?;
        rec.add("training_log", log_path);
    }
    rec.finish()
}

fn detector_meta(model: &DetectorModel) -> serde_json::Value {
    json!({
        "architecture": model.architecture.display_name(),
        "network": model.network_label(),
    })
}

fn classifier_meta(model: &ClassifierModel) -> serde_json::Value {
    json!({ "backbone": model.backbone.tag(), "fine_grained": model.fine_grained })
}

fn read_detections(path: &Path) -> Result<Vec<ImageDetections>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

fn config_value(config: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

pub fn eval_detector(config: &RunConfig) -> Result<()> {
    let model = match &config.eval.detections {
        Some(_) => None,
        None => {
            let path = config.detector_checkpoint();
            require_file(&path, "detector")?;
            Some(DetectorModel::load(&path)?)
        }
    };
    let test = load_part(config, config.eval.part)?;
    let dir = config.output.dir.join("eval-detector");
    let mut rec = RunRecord::begin(config, &dir, "eval-detector")?;
    let p = &config.pipeline;
    let (detections, meta) = match (&model, &config.eval.detections) {
        (Some(m), _) => (
            test.iter()
                .map(|r| ImageDetections {
                    id: r.id.clone(),
                    detections: m.detect(r, p.score_threshold, p.nms_threshold),
                })
                .collect(),
            detector_meta(m),
        ),
        (None, Some(path)) => (
            read_detections(path)?,
            json!({ "architecture": "Detections file", "network": path.display().to_string() }),
        ),
        (None, None) => unreachable!("either a checkpoint or a detections file"),
    };
    let report = evaluate_detections(&detections, &test, &p.eval)?;
    let doc = EvaluationDocument {
        detection: Some(report),
        classification: None,
        full_image: None,
        config: json!({ "detector": meta, "run": config_value(config)? }),
    };
    let path = dir.join("report.json");
    write_json(&path, &doc)?;
    rec.add("report", path);
    if model.is_some() {
        let path = dir.join("detections.jsonl");
        write_jsonl(&path, &detections)?;
        rec.add("detections", path);
    }
    let text = dir.join("tables.txt");
    write_atomic(&text, render_document(&doc).as_bytes())?;
    rec.add("tables", text);
    rec.finish()
}

pub fn eval_pipeline(config: &RunConfig) -> Result<()> {
    let det_path = config.detector_checkpoint();
    let cls_path = config.classifier_checkpoint();
    require_file(&det_path, "detector")?;
    require_file(&cls_path, "classifier")?;
    let full_path = config.full_image_checkpoint();
    if config.crops.full_image_baseline {
        require_file(&full_path, "whole-image classifier")?;
    }
    let detector = DetectorModel::load(&det_path)?;
    let classifier = ClassifierModel::load(&cls_path)?;
    let full = config
        .crops
        .full_image_baseline
        .then(|| ClassifierModel::load(&full_path))
        .transpose()?;
    let test = load_part(config, config.eval.part)?;
    let dir = config.output.dir.join("eval-pipeline");
    let mut rec = RunRecord::begin(config, &dir, "eval-pipeline")?;
    let out = evaluate_pipeline(&detector, &classifier, &test, &config.pipeline)?;
    let full_report = full.as_ref().map(|m| evaluate_full_image(m, &test)).transpose()?;
    let doc = EvaluationDocument {
        detection: Some(out.detection),
        classification: Some(out.classification),
        full_image: full_report,
        config: json!({
            "detector": detector_meta(&detector),
            "classifier": classifier_meta(&classifier),
            "full_image": full.as_ref().map(classifier_meta),
            "run": config_value(config)?,
        }),
    };
    let path = dir.join("report.json");
    write_json(&path, &doc)?;
    rec.add("report", path);
    let sidecar = dir.join("detections.jsonl");
    write_jsonl(&sidecar, &out.images)?;
    rec.add("detections", sidecar);
    let text = dir.join("tables.txt");
    write_atomic(&text, render_document(&doc).as_bytes())?;
    rec.add("tables", text);
    rec.finish()
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", input.display())));
    }
    Ok(files)
}

pub fn infer(config: &RunConfig) -> Result<()> {
    let input = config
        .infer
        .input
        .clone()
        .ok_or_else(|| Error::Config("infer needs `infer.input` (a PNG file or directory)".into()))?;
    let det_path = config.detector_checkpoint();
    let cls_path = config.classifier_checkpoint();
    require_file(&det_path, "detector")?;
    require_file(&cls_path, "classifier")?;
    let detector = DetectorModel::load(&det_path)?;
    let classifier = ClassifierModel::load(&cls_path)?;
    let files = png_inputs(&input)?;
    let dir = config.output.dir.join("infer");
    let mut rec = RunRecord::begin(config, &dir, "infer")?;
    let p = &config.pipeline;
    let mut lines = Vec::with_capacity(files.len());
    for file in files {
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let record = ImageRecord {
            id: id.clone(),
            image: Image::load_png(&file)?,
            annotations: Vec::new(),
        };
        let dets = detector.detect(&record, p.score_threshold, p.nms_threshold);
        let screened = screen_detections(&classifier, &record, &dets, p)?;
        let out = dir.join(format!("{id}.png"));
        annotate(&record.image, &screened, config.infer.scale).save_png(&out)?;
        rec.add("annotated_image", out);
        lines.push(ScreenedImage { id, detections: screened });
    }
    let sidecar = dir.join("detections.jsonl");
    write_jsonl(&sidecar, &lines)?;
    rec.add("detections", sidecar);
    rec.finish()
}

fn table_row_for_detector(meta: &serde_json::Value) -> TableRow {
    let s = |k: &str| meta.get(k).and_then(|v| v.as_str()).unwrap_or("-").to_string();
    TableRow::new("", s("architecture"), s("network"))
}

fn classifier_row(group: &str, meta: Option<&serde_json::Value>) -> TableRow {
    let fine = meta.and_then(|m| m.get("fine_grained")).and_then(|v| v.as_bool()).unwrap_or(false);
    let backbone = meta.and_then(|m| m.get("backbone")).and_then(|v| v.as_str()).unwrap_or("-");
    let model = if fine {
        "Classification via Fine-Grained"
    } else {
        "Classification via CNN"
    };
    TableRow::new(group, model, backbone)
}

/// Plain-text tables for one evaluation document.
pub fn render_document(doc: &EvaluationDocument) -> String {
    let mut out = String::new();
    if let Some(d) = &doc.detection {
        let row = table_row_for_detector(doc.config.get("detector").unwrap_or(&serde_json::Value::Null));
        out.push_str("Average precision (IoU 0.50:0.95)\n");
        out.push_str(&render_detection_table(&[(row.clone(), d)], false));
        out.push_str("\nAverage precision (IoU 0.50)\n");
        out.push_str(&render_detection_table(&[(row, d)], true));
    }
    let mut rows = Vec::new();
    if let Some(c) = &doc.classification {
        rows.push((classifier_row("Dual CNN (pre-localization)", doc.config.get("classifier")), c));
    }
    if let Some(f) = &doc.full_image {
        rows.push((classifier_row("Full Image (no localization)", doc.config.get("full_image")), f));
    }
    if !rows.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("Anomaly classification\n");
        out.push_str(&render_pipeline_table(&rows));
    }
    out
}

/// Collects the evaluation reports under the output directory into one
/// text report, printed and written to `report.txt`.
pub fn report(config: &RunConfig) -> Result<()> {
    let mut sections = Vec::new();
    for (name, title) in [("eval-detector", "Detector evaluation"), ("eval-pipeline", "Pipeline evaluation")] {
        let path = config.output.dir.join(name).join("report.json");
        if path.is_file() {
            let doc: EvaluationDocument = read_json(&path)?;
            sections.push(format!("== {title} ({}) ==\n\n{}", path.display(), render_document(&doc)));
        }
    }
    if sections.is_empty() {
        return Err(Error::Validation(format!(
            "no evaluation reports under {}; run eval-detector or eval-pipeline first",
            config.output.dir.display()
        )));
    }
    let text = sections.join("\n");
    let mut rec = RunRecord::begin(config, &config.output.dir, "report")?;
    let path = config.output.dir.join("report.txt");
    write_atomic(&path, text.as_bytes())?;
    rec.add("report", path);
    print!("{text}");
    rec.finish()
}
