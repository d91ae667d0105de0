use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, ClassifierModel, CropSample, FilterBankConfig};
use crate::data::AnomalyLabel;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, rng, LrSchedule, Parameterized, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub backbone: Backbone,
    pub fine_grained: bool,
    pub filter_bank: FilterBankConfig,
    /// With `fine_grained`, train the base classifier first and attach the
    /// bank to its trained network.
    pub warm_start: bool,
    /// (height, width) of classifier inputs.
    pub input_size: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Fractions of the total iteration count at which the rate decays.
    pub lr_steps: Vec<f64>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub flip_prob: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Medium,
            fine_grained: false,
            filter_bank: FilterBankConfig::default(),
            warm_start: true,
            input_size: [128, 128],
            epochs: 20,
            batch_size: 16,
            base_lr: 0.01,
            warmup_iters: 50,
            warmup_factor: 0.1,
            lr_steps: vec![0.7, 0.9],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            flip_prob: 0.5,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("classifier training: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.threshold) {
            return bad("flip_prob and threshold must be in [0, 1]");
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.lr_steps.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("lr_steps are fractions of the iteration budget");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainingLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Per-label loss weights (benign, anomalous).
    pub class_weights: [f64; 2],
}

/// Fraction of samples whose predicted label matches.
pub(crate) fn accuracy(model: &ClassifierModel, samples: &[CropSample]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        if model.classify(&s.patch)?.0 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Seeds each filter with a unit-norm tap-layer activation taken at a random
/// position of a random training crop of its class.
fn init_filter_bank(model: &mut ClassifierModel, crops: &[CropSample], by_label: &[Vec<usize>; 2], r: &mut impl Rng) {
    let net = &mut model.network;
    let Some(bank) = net.bank.as_ref() else {
        return;
    };
    let (tap, fpc) = (bank.tap, bank.filters_per_class);
    let channels = bank.conv.in_channels;
    let mut weights = Vec::with_capacity(2 * fpc * channels);
    for idx in by_label {
        for _ in 0..fpc {
            let sample = &crops[idx[r.gen_range(0..idx.len())]];
            let t = net.tap_features(model.normalization.apply(&sample.patch), tap);
            let pos = r.gen_range(0..t.plane());
            let v: Vec<f64> = (0..channels).map(|c| t.data[c * t.plane() + pos]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                weights.extend(v.iter().map(|x| x / norm));
            } else {
                weights.extend(std::iter::repeat(1.0 / (channels as f64).sqrt()).take(channels));
            }
        }
    }
    let bank = net.bank.as_mut().expect("checked above");
    bank.conv.weight.value = weights;
    bank.conv.bias.value.fill(0.0);
}

pub fn train_classifier(
    crops: &[CropSample],
    val_crops: &[CropSample],
    config: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, ClassifierTrainingLog)> {
    config.validate()?;
    let size = (config.input_size[0], config.input_size[1]);
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, c) in crops.iter().enumerate() {
        if (c.patch.height(), c.patch.width()) != size {
            return Err(Error::Shape {
                expected: format!("{}x{} training crop", size.0, size.1),
                actual: format!("{}x{} ({})", c.patch.height(), c.patch.width(), c.source_image_id),
            });
        }
        by_label[c.label.index()].push(i);
    }
    if by_label.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "classifier training needs both labels, got {} benign and {} anomalous crops",
            by_label[0].len(),
            by_label[1].len()
        )));
    }
    let n = crops.len() as f64;
    let class_weights = [n / (2.0 * by_label[0].len() as f64), n / (2.0 * by_label[1].len() as f64)];
    let bank = config.fine_grained.then(|| config.filter_bank.clone());
    let mut model = ClassifierModel::new(config.backbone, bank, size, config.seed)?;
    model.threshold = config.threshold;
    let mut start_from_init = false;
    if config.fine_grained && config.warm_start {
        let base_config = ClassifierTrainConfig {
            fine_grained: false,
            ..config.clone()
        };
        let (base, base_log) = train_classifier(crops, val_crops, &base_config)?;
        log::info!("base classifier trained (best epoch {}), attaching the filter bank", base_log.best_epoch);
        let bank = model.network.bank.as_ref().expect("fine-grained model has a bank");
        let (tap, fpc) = (bank.tap, bank.filters_per_class);
        let mut network = base.network;
        network.attach_bank(tap, fpc, &mut rng(config.seed, 3))?;
        model.network = network;
        start_from_init = true;
    }
    let aux_weight = model.filter_bank.as_ref().map_or(0.0, |b| b.aux_weight);
    let mut init_rng = rng(config.seed, 1);
    init_filter_bank(&mut model, crops, &by_label, &mut init_rng);
    fit(model, crops, val_crops, config, class_weights, aux_weight, start_from_init)
}

/// SGD over `crops`, returning the best-validation snapshot. With
/// `keep_initial` the untrained starting point competes as epoch 0.
fn fit(
    mut model: ClassifierModel,
    crops: &[CropSample],
    val_crops: &[CropSample],
    config: &ClassifierTrainConfig,
    class_weights: [f64; 2],
    aux_weight: f64,
    keep_initial: bool,
) -> Result<(ClassifierModel, ClassifierTrainingLog)> {
    let n = crops.len() as f64;
    let batches_per_epoch = crops.len().div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let schedule = LrSchedule {
        base_lr: config.base_lr,
        warmup_iters: config.warmup_iters,
        warmup_factor: config.warmup_factor,
        steps: config.lr_steps.iter().map(|f| (f * total as f64).round() as usize).collect(),
        gamma: config.lr_gamma,
    };
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut data_rng = rng(config.seed, 2);
    let mut log = ClassifierTrainingLog {
        class_weights,
        ..Default::default()
    };
    let mut best: Option<(f64, ClassifierModel)> = None;
    if keep_initial && !val_crops.is_empty() {
        best = Some((accuracy(&model, val_crops)?, model.clone()));
    }
    let mut it = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..crops.len()).collect();
        order.shuffle(&mut data_rng);
        let (mut epoch_loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            model.network.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let s = &crops[i];
                let patch = if data_rng.gen::<f64>() < config.flip_prob {
                    s.patch.flip_horizontal()
                } else {
                    s.patch.clone()
                };
                let label = s.label.index();
                let input = model.normalization.apply(&patch);
                let (l, logits) =
                    model
                        .network
                        .accumulate_gradients(input, label, class_weights[label], aux_weight);
                loss += l;
                let predicted = AnomalyLabel::from_flag(crate::nn::softmax(&logits)[1] >= model.threshold);
                correct += usize::from(predicted == s.label);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: it, loss });
            }
            clip_grad_norm(&mut model.network, config.grad_clip / scale);
            sgd.step(&mut model.network, schedule.lr_at(it), scale);
            epoch_loss += loss;
            it += 1;
        }
        let val_accuracy = if val_crops.is_empty() {
            None
        } else {
            Some(accuracy(&model, val_crops)?)
        };
        let stats = EpochStats {
            epoch,
            loss: epoch_loss / n,
            train_accuracy: correct as f64 / n,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.4}, validation accuracy {}",
            stats.loss,
            stats.train_accuracy,
            val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        log.epochs.push(stats);
        if let Some(acc) = val_accuracy {
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                log.best_epoch = epoch;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            log.best_epoch = config.epochs;
            model
        }
    };
    Ok((model, log))
}
