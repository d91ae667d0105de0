//! Crop-level anomaly classification: plain CNN backbones, the
//! discriminative filter-bank head and the whole-image baseline.

mod arch;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{crop, AnomalyLabel, Image, ImageRecord, ObjectClass};
use crate::detector::Normalization;
use crate::error::{Error, Result};
use crate::eval::CropClassifier;
use crate::nn::{Parameterized, Tensor};

pub use self::arch::{receptive_field, ReceptiveField};
pub(crate) use self::arch::ClassifierNet;
pub use self::train::{train_classifier, ClassifierTrainConfig, ClassifierTrainingLog, EpochStats};

pub const CHECKPOINT_VERSION: &str = "dualscreen-cls-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Small,
    Medium,
    Residual,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Small, Backbone::Medium, Backbone::Residual];

    pub fn tag(self) -> &'static str {
        match self {
            Backbone::Small => "small",
            Backbone::Medium => "medium",
            Backbone::Residual => "residual",
        }
    }

    /// Index of the backbone layer whose output has a 92x92 receptive field
    /// at stride 8.
    pub fn default_tap_layer(self) -> usize {
        let mut rng = crate::nn::rng(0, 0);
        arch::build_backbone(self, &mut rng).default_tap
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}` (expected small, medium or residual)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterBankConfig {
    /// Backbone layer index; `None` picks the backbone's default tap.
    pub tap_layer: Option<usize>,
    pub filters_per_class: usize,
    pub receptive_patch: usize,
    pub patch_stride: usize,
    /// Weight of the auxiliary cross-entropy on the pooled bank responses.
    pub aux_weight: f64,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self {
            tap_layer: None,
            filters_per_class: 16,
            receptive_patch: 92,
            patch_stride: 8,
            aux_weight: 0.5,
        }
    }
}

/// One labelled classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub patch: Image,
    pub label: AnomalyLabel,
    /// `None` for whole-image samples.
    pub source_class: Option<ObjectClass>,
    pub source_image_id: String,
}

/// Ground-truth object crops of every record, padded and resized.
pub fn crops_from_records(records: &[ImageRecord], pad_fraction: f64, size: (usize, usize)) -> Result<Vec<CropSample>> {
    let mut out = Vec::new();
    for r in records {
        for a in &r.annotations {
            out.push(CropSample {
                patch: crop(&r.image, &a.bbox, pad_fraction, size)?,
                label: a.anomaly,
                source_class: Some(a.object_class),
                source_image_id: r.id.clone(),
            });
        }
    }
    Ok(out)
}

/// Whole images resized to `size`, labelled with the image-level label.
pub fn full_image_samples(records: &[ImageRecord], size: (usize, usize)) -> Vec<CropSample> {
    records
        .iter()
        .map(|r| CropSample {
            patch: r.image.resize(size.0, size.1),
            label: r.image_label(),
            source_class: None,
            source_image_id: r.id.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub version: String,
    pub backbone: Backbone,
    pub fine_grained: bool,
    pub filter_bank: Option<FilterBankConfig>,
    /// (height, width) of accepted patches.
    pub input_size: (usize, usize),
    pub normalization: Normalization,
    pub threshold: f64,
    pub seed: u64,
    pub(crate) network: ClassifierNet,
}

impl ClassifierModel {
    /// Untrained model. With `filter_bank` set the bank is attached at its tap
    /// layer after checking the receptive-field geometry.
    pub fn new(
        backbone: Backbone,
        filter_bank: Option<FilterBankConfig>,
        input_size: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if input_size.0 < 8 || input_size.1 < 8 {
            return Err(Error::Config(format!(
                "classifier input must be at least 8x8, got {}x{}",
                input_size.0, input_size.1
            )));
        }
        let mut rng = crate::nn::rng(seed, 0);
        let mut network = ClassifierNet::new(backbone, &mut rng);
        let mut bank_cfg = None;
        if let Some(cfg) = filter_bank {
            let tap = cfg.tap_layer.unwrap_or_else(|| backbone.default_tap_layer());
            check_geometry(&network, tap, &cfg)?;
            if !(cfg.aux_weight >= 0.0 && cfg.aux_weight.is_finite()) {
                return Err(Error::Config(format!("aux_weight must be >= 0, got {}", cfg.aux_weight)));
            }
            network.attach_bank(tap, cfg.filters_per_class, &mut rng)?;
            bank_cfg = Some(FilterBankConfig {
                tap_layer: Some(tap),
                ..cfg
            });
        }
        Ok(Self {
            version: CHECKPOINT_VERSION.to_string(),
            backbone,
            fine_grained: bank_cfg.is_some(),
            filter_bank: bank_cfg,
            input_size,
            normalization: Normalization::default(),
            threshold: 0.5,
            seed,
            network,
        })
    }

    pub fn num_params(&self) -> usize {
        self.network.num_params()
    }

    /// Every trainable value, flattened in a fixed order.
    pub fn parameters(&self) -> Vec<f64> {
        self.network.flat_values()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.num_params()),
                actual: values.len().to_string(),
            });
        }
        let mut rest = values;
        for p in self.network.params_mut() {
            let (head, tail) = rest.split_at(p.value.len());
            p.value.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Training loss on one labelled patch, auxiliary filter-bank term
    /// included, and its gradient in the order of [`Self::parameters`].
    pub fn loss_gradient(&self, patch: &Image, label: AnomalyLabel) -> Result<(f64, Vec<f64>)> {
        let x = self.tensor(patch)?;
        let aux = self.filter_bank.as_ref().map_or(0.0, |b| b.aux_weight);
        let mut net = self.network.clone();
        net.zero_grad();
        let (loss, _) = net.accumulate_gradients(x, label.index(), 1.0, aux);
        Ok((loss, net.flat_grads()))
    }

    fn tensor(&self, patch: &Image) -> Result<Tensor> {
        let (h, w) = self.input_size;
        if (patch.height(), patch.width()) != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w} patch"),
                actual: format!("{}x{}", patch.height(), patch.width()),
            });
        }
        Ok(self.normalization.apply(patch))
    }

    /// Probabilities of (benign, anomalous).
    pub fn probabilities(&self, patch: &Image) -> Result<[f64; 2]> {
        let p = crate::nn::softmax(&self.network.forward(self.tensor(patch)?));
        Ok([p[0], p[1]])
    }

    pub fn classify(&self, patch: &Image) -> Result<(AnomalyLabel, f64)> {
        let score = self.probabilities(patch)?[1];
        Ok((label_for(score, self.threshold), score))
    }

    /// Classifies a whole scene resized to the model input.
    pub fn classify_full_image(&self, record: &ImageRecord) -> Result<(AnomalyLabel, f64)> {
        let (h, w) = self.input_size;
        self.classify(&record.image.resize(h, w))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: ClassifierModel = crate::io::read_json(path)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported classifier checkpoint version `{}` (expected `{CHECKPOINT_VERSION}`)",
                path.display(),
                model.version
            )));
        }
        Ok(model)
    }
}

impl CropClassifier for ClassifierModel {
    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn classify(&self, patch: &Image) -> Result<(AnomalyLabel, f64)> {
        ClassifierModel::classify(self, patch)
    }
}

/// Anomalous iff `score >= threshold`.
pub fn label_for(score: f64, threshold: f64) -> AnomalyLabel {
    AnomalyLabel::from_flag(score >= threshold)
}

fn check_geometry(net: &ClassifierNet, tap: usize, cfg: &FilterBankConfig) -> Result<()> {
    let layers = &net.features.layers;
    if tap >= layers.len() {
        return Err(Error::Config(format!(
            "tap layer {tap} does not exist (backbone has {} layers)",
            layers.len()
        )));
    }
    let rf = receptive_field(&layers[..=tap]);
    if rf.size != cfg.receptive_patch || rf.stride != cfg.patch_stride {
        return Err(Error::Config(format!(
            "tap layer {tap} sees {}x{} patches at stride {}, not {}x{} at stride {}",
            rf.size, rf.size, rf.stride, cfg.receptive_patch, cfg.receptive_patch, cfg.patch_stride
        )));
    }
    Ok(())
}
