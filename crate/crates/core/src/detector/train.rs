use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::single_stage::LossParams;
use super::two_stage::Sampling;
use super::{AnchorConfig, Architecture, BackboneConfig, DetectorModel, Network};
use crate::data::{flip_horizontal, rescale, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, EvalConfig, ImageDetections};
use crate::nn::{clip_grad_norm, rng, LrSchedule, Parameterized, Sgd};

/// Everything `train_detector` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub architecture: Architecture,
    /// Defaults to the architecture's own backbone when absent.
    pub backbone: Option<BackboneConfig>,
    pub anchors: AnchorConfig,
    pub iterations: usize,
    /// Images per optimiser step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Learning-rate drops, as fractions of `iterations`.
    pub lr_steps: Vec<f64>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Defaults to the architecture's thresholds when absent.
    pub iou_neg: Option<f64>,
    pub iou_pos: Option<f64>,
    pub box_beta: f64,
    pub box_weight: f64,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub flip_prob: f64,
    /// Uniform range of the random rescale factor; `[1, 1]` disables it.
    pub scale_range: [f64; 2],
    pub eval_interval: usize,
    pub eval_score_threshold: f64,
    pub nms_threshold: f64,
    pub seed: u64,
    /// `deep_backbone` halves the learning rate and doubles the schedule.
    pub preset: Option<String>,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Reference,
            backbone: None,
            anchors: AnchorConfig::default(),
            iterations: 2000,
            batch_size: 4,
            base_lr: 0.0025,
            warmup_iters: 100,
            warmup_factor: 0.1,
            lr_steps: vec![0.75, 0.9],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            iou_neg: None,
            iou_pos: None,
            box_beta: 1.0 / 9.0,
            box_weight: 1.0,
            rpn_batch: 512,
            roi_batch: 64,
            flip_prob: 0.5,
            scale_range: [1.0, 1.0],
            eval_interval: 250,
            eval_score_threshold: 0.05,
            nms_threshold: 0.5,
            seed: 0,
            preset: None,
        }
    }
}

pub const DEEP_BACKBONE: &str = "deep_backbone";

impl DetectorTrainConfig {
    /// Applies the preset (if any) and fills architecture defaults.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        match c.preset.as_deref() {
            None => {}
            Some(DEEP_BACKBONE) => {
                c.base_lr *= 0.5;
                c.iterations *= 2;
                c.warmup_iters *= 2;
                c.eval_interval *= 2;
            }
            Some(other) => return Err(Error::Config(format!("unknown detector preset `{other}`"))),
        }
        c.preset = None;
        let (neg, pos) = c.architecture.default_iou_thresholds();
        c.iou_neg.get_or_insert(neg);
        c.iou_pos.get_or_insert(pos);
        if c.backbone.is_none() {
            c.backbone = Some(c.architecture.default_backbone());
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector training: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal_gamma must be >= 0 and focal_alpha in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 1]");
        }
        let [lo, hi] = self.scale_range;
        if !(0.5 <= lo && lo <= hi && hi <= 2.0) {
            return bad("scale_range must lie within [0.5, 2.0] and be ordered");
        }
        if self.eval_interval == 0 || self.box_beta <= 0.0 || self.grad_clip <= 0.0 {
            return bad("eval_interval, box_beta and grad_clip must be positive");
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("rpn_batch and roi_batch must be positive");
        }
        if self.lr_steps.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("lr_steps are fractions of the iteration budget");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_iters: self.warmup_iters,
            warmup_factor: self.warmup_factor,
            steps: self
                .lr_steps
                .iter()
                .map(|f| (f * self.iterations as f64).round() as usize)
                .collect(),
            gamma: self.lr_gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub map50: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-image loss of every iteration.
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    /// Iteration count of the returned checkpoint.
    pub best_iteration: usize,
}

/// mAP@0.5 of `model` on `data`.
pub(crate) fn validation_map50(model: &DetectorModel, data: &[ImageRecord], score_thr: f64, nms_thr: f64) -> Result<f64> {
    let dets: Vec<ImageDetections> = data
        .iter()
        .map(|r| ImageDetections {
            id: r.id.clone(),
            detections: model.detect(r, score_thr, nms_thr),
        })
        .collect();
    let cfg = EvalConfig { theta_set: vec![0.5] };
    Ok(evaluate_detections(&dets, data, &cfg)?.map50)
}

fn augment(record: &ImageRecord, cfg: &DetectorTrainConfig, r: &mut impl Rng) -> Result<ImageRecord> {
    let mut out = if r.gen::<f64>() < cfg.flip_prob {
        flip_horizontal(record)
    } else {
        record.clone()
    };
    let [lo, hi] = cfg.scale_range;
    if hi > lo {
        out = rescale(&out, r.gen_range(lo..=hi))?;
    }
    Ok(out)
}

/// Trains a detector with SGD, keeping the parameters with the best validation
/// mAP@0.5 (ties keep the earlier checkpoint). With an empty validation set
/// the final parameters are returned.
pub fn train_detector(
    train: &[ImageRecord],
    val: &[ImageRecord],
    config: &DetectorTrainConfig,
) -> Result<(DetectorModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("detector training set is empty".into()));
    }
    let cfg = config.resolved()?;
    let backbone = cfg.backbone.clone().expect("resolved");
    let mut model = DetectorModel::new(cfg.architecture, backbone, cfg.anchors.clone(), cfg.seed)?;
    let lp = LossParams {
        gamma: cfg.focal_gamma,
        alpha: cfg.focal_alpha,
        iou_neg: cfg.iou_neg.expect("resolved"),
        iou_pos: cfg.iou_pos.expect("resolved"),
        box_beta: cfg.box_beta,
        box_weight: cfg.box_weight,
    };
    let sampling = Sampling {
        rpn_batch: cfg.rpn_batch,
        roi_batch: cfg.roi_batch,
    };
    let schedule = cfg.schedule();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut data_rng = rng(cfg.seed, 2);
    let mut sample_rng = rng(cfg.seed, 3);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, DetectorModel)> = None;
    let scale = 1.0 / cfg.batch_size as f64;
    model.network.zero_grad();

    for it in 0..cfg.iterations {
        model.network.zero_grad();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            let record = augment(&train[order[cursor]], &cfg, &mut data_rng)?;
            cursor += 1;
            let input = model.normalization.apply(&record.image);
            let parts = match &mut model.network {
                Network::SingleStage(n) => n.accumulate_gradients(input, &record.annotations, &cfg.anchors, &lp)?,
                Network::TwoStage(n) => {
                    n.accumulate_gradients(input, &record.annotations, &cfg.anchors, &lp, &sampling, &mut sample_rng)?
                }
            };
            loss += parts.total() * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        clip_grad_norm(&mut model.network, cfg.grad_clip / scale);
        sgd.step(&mut model.network, schedule.lr_at(it), scale);
        log.losses.push(loss);
        if (it + 1) % 50 == 0 {
            log::debug!("iteration {} loss {loss:.4} lr {:.5}", it + 1, schedule.lr_at(it));
        }
        let done = it + 1;
        if !val.is_empty() && (done % cfg.eval_interval == 0 || done == cfg.iterations) {
            let map50 = validation_map50(&model, val, cfg.eval_score_threshold, cfg.nms_threshold)?;
            log::info!("iteration {done}: loss {loss:.4}, validation mAP@0.5 {map50:.4}");
            log.validation.push(ValidationPoint { iteration: done, map50 });
            if best.as_ref().map_or(true, |(b, _)| map50 > *b) {
                best = Some((map50, model.clone()));
                log.best_iteration = done;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            log.best_iteration = cfg.iterations;
            model
        }
    };
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_halves_lr_and_doubles_schedule() {
        let base = DetectorTrainConfig::default();
        let deep = DetectorTrainConfig {
            preset: Some(DEEP_BACKBONE.into()),
            ..base.clone()
        }
        .resolved()
        .unwrap();
        assert_eq!(deep.base_lr, base.base_lr / 2.0);
        assert_eq!(deep.iterations, base.iterations * 2);
        let bad = DetectorTrainConfig {
            preset: Some("nope".into()),
            ..base
        };
        assert!(matches!(bad.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn architecture_defaults_fill_thresholds() {
        let c = DetectorTrainConfig {
            architecture: Architecture::FasterRcnn,
            ..Default::default()
        }
        .resolved()
        .unwrap();
        assert_eq!((c.iou_neg, c.iou_pos), (Some(0.3), Some(0.7)));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(train_detector(&[], &[], &DetectorTrainConfig::default()).is_err());
    }
}
