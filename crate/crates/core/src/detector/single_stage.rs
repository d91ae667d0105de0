use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxcoder::{decode_scaled, DELTA_STD};
use super::trunk::BackboneConfig;
use super::{assign_targets, clipped_detection, focal_loss_logits, generate_anchors, AnchorConfig, AnchorLabel, Detection};
use crate::data::{Annotation, ObjectClass};
use crate::error::Result;
use crate::nn::{smooth_l1, softmax, Conv2d, Layer, Param, Parameterized, Sequential, Tensor};

/// Six object classes plus background at index 0.
pub(crate) const NUM_OUTPUTS: usize = ObjectClass::COUNT + 1;
const A: usize = AnchorConfig::PER_LOCATION;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LossParams {
    pub gamma: f64,
    pub alpha: f64,
    pub iou_neg: f64,
    pub iou_pos: f64,
    pub box_beta: f64,
    pub box_weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct LossParts {
    pub classification: f64,
    pub regression: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Trunk, one shared 3x3 head conv, then per-anchor class logits (channel
/// `a * 7 + k`) and box offsets (channel `a * 4 + c`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SingleStageNet {
    trunk: Sequential,
    head: Sequential,
    cls: Conv2d,
    reg: Conv2d,
}

impl SingleStageNet {
    pub fn new(backbone: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let trunk = backbone.build(rng);
        let f = backbone.out_channels();
        let head = Sequential::new(vec![Layer::Conv(Conv2d::new(f, f, 3, 1, 1, rng)), Layer::Relu]);
        let mut cls = Conv2d::with_std(f, A * NUM_OUTPUTS, 3, 1, 1, 0.01, rng);
        // Start with ~1% total foreground probability so early training is not
        // swamped by the easy background anchors.
        let bg_bias = (0.99 * ObjectClass::COUNT as f64 / 0.01).ln();
        for a in 0..A {
            cls.bias.value[a * NUM_OUTPUTS] = bg_bias;
        }
        let reg = Conv2d::with_std(f, A * 4, 3, 1, 1, 0.01, rng);
        Self { trunk, head, cls, reg }
    }

    fn features(&self, input: Tensor) -> Tensor {
        let (feat, _) = self.trunk.forward(input, false);
        self.head.forward(feat, false).0
    }

    pub fn candidates(&self, input: Tensor, anchors: &AnchorConfig, size: (f64, f64), score_threshold: f64) -> Vec<Detection> {
        let h = self.features(input);
        let (cls, _) = self.cls.forward(&h, false);
        let (reg, _) = self.reg.forward(&h, false);
        let (rows, cols) = (h.height, h.width);
        let boxes = generate_anchors((rows, cols), anchors);
        let mut out = Vec::new();
        let mut logits = [0.0; NUM_OUTPUTS];
        for (ai, anchor) in boxes.iter().enumerate() {
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            for (k, l) in logits.iter_mut().enumerate() {
                *l = cls.at(a * NUM_OUTPUTS + k, i, j);
            }
            let p = softmax(&logits);
            if p[1..].iter().all(|&s| s < score_threshold) {
                continue;
            }
            let deltas = [0, 1, 2, 3].map(|c| reg.at(a * 4 + c, i, j));
            let decoded = decode_scaled(anchor, deltas);
            for (k, &score) in p.iter().enumerate().skip(1) {
                if score < score_threshold {
                    continue;
                }
                let class = ObjectClass::from_code(k - 1).expect("class index");
                if let Some(d) = clipped_detection(decoded, size, class, score) {
                    if d.score >= score_threshold {
                        out.push(d);
                    }
                }
            }
        }
        out
    }

    /// Forward + backward on one image; gradients are accumulated.
    pub fn accumulate_gradients(
        &mut self,
        input: Tensor,
        gt: &[Annotation],
        anchors: &AnchorConfig,
        lp: &LossParams,
    ) -> Result<LossParts> {
        let (feat, trunk_cache) = self.trunk.forward(input, true);
        let (h, head_cache) = self.head.forward(feat, true);
        let (cls, cls_cache) = self.cls.forward(&h, true);
        let (reg, reg_cache) = self.reg.forward(&h, true);
        let (rows, cols) = (h.height, h.width);
        let boxes = generate_anchors((rows, cols), anchors);
        let targets = assign_targets(&boxes, gt, lp.iou_neg, lp.iou_pos)?;

        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut used = Vec::new();
        let mut positives = Vec::new();
        for (ai, t) in targets.iter().enumerate() {
            let label = match t.label {
                AnchorLabel::Ignore => continue,
                AnchorLabel::Negative => 0,
                AnchorLabel::Positive { class, .. } => {
                    positives.push(ai);
                    class.code() + 1
                }
            };
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            logits.extend((0..NUM_OUTPUTS).map(|k| cls.at(a * NUM_OUTPUTS + k, i, j)));
            labels.push(label);
            used.push(ai);
        }
        let norm = positives.len().max(1) as f64;
        let focal = focal_loss_logits(&logits, NUM_OUTPUTS, &labels, 0, lp.gamma, lp.alpha, norm)?;
        let mut dcls = Tensor::zeros(cls.channels, rows, cols);
        for (n, &ai) in used.iter().enumerate() {
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            for k in 0..NUM_OUTPUTS {
                *dcls.at_mut(a * NUM_OUTPUTS + k, i, j) = focal.grad[n * NUM_OUTPUTS + k];
            }
        }

        let mut dreg = Tensor::zeros(reg.channels, rows, cols);
        let mut box_loss = 0.0;
        for &ai in &positives {
            let t = targets[ai].regression.expect("positive anchors carry targets");
            let target = [0, 1, 2, 3].map(|c| t[c] / DELTA_STD[c]);
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            let pred = [0, 1, 2, 3].map(|c| reg.at(a * 4 + c, i, j));
            let (l, g) = smooth_l1(&pred, &target, lp.box_beta);
            box_loss += l;
            for c in 0..4 {
                *dreg.at_mut(a * 4 + c, i, j) = lp.box_weight * g[c] / norm;
            }
        }
        let parts = LossParts {
            classification: focal.loss,
            regression: lp.box_weight * box_loss / norm,
        };
        if !parts.total().is_finite() {
            return Ok(parts);
        }

        let mut dh = self.cls.backward(&cls_cache.expect("cache"), &dcls, true).expect("input grad");
        dh.add_assign(&self.reg.backward(&reg_cache.expect("cache"), &dreg, true).expect("input grad"));
        let dfeat = self
            .head
            .backward(&head_cache.expect("cache"), dh, true)
            .expect("input grad");
        self.trunk.backward(&trunk_cache.expect("cache"), dfeat, false);
        Ok(parts)
    }
}

impl Parameterized for SingleStageNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.trunk.params();
        v.extend(self.head.params());
        v.extend([&self.cls.weight, &self.cls.bias, &self.reg.weight, &self.reg.bias]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.trunk.params_mut();
        v.extend(self.head.params_mut());
        v.extend([&mut self.cls.weight, &mut self.cls.bias, &mut self.reg.weight, &mut self.reg.bias]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnomalyLabel, BoundingBox};
    use crate::nn::rng;
    use rand::Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            widths: vec![3, 4, 4],
            residual_blocks: 0,
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = rng(4, 0);
        let mut net = SingleStageNet::new(&small(), &mut r);
        // Perturb the heads away from their near-constant initialisation.
        for p in net.params_mut() {
            for v in &mut p.value {
                *v += r.gen_range(-0.05..0.05);
            }
        }
        let input = Tensor::new(3, 24, 24, (0..3 * 24 * 24).map(|_| r.gen_range(-1.0..1.0)).collect());
        let gt = vec![Annotation {
            bbox: BoundingBox::from_array([3.0, 4.0, 19.0, 15.0]).unwrap(),
            object_class: ObjectClass::Mobile,
            anomaly: AnomalyLabel::Benign,
        }];
        let anchors = AnchorConfig {
            scales: [8.0, 12.0, 16.0],
            ..AnchorConfig::default()
        };
        let lp = LossParams {
            gamma: 2.0,
            alpha: 0.25,
            iou_neg: 0.4,
            iou_pos: 0.5,
            box_beta: 0.5,
            box_weight: 1.0,
        };
        net.zero_grad();
        net.accumulate_gradients(input.clone(), &gt, &anchors, &lp).unwrap();
        let grads = net.flat_grads();
        let values = net.flat_values();
        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..values.len()).step_by(7) {
            let mut up = net.clone();
            up.set_flat_value(idx, values[idx] + h);
            let mut dn = net.clone();
            dn.set_flat_value(idx, values[idx] - h);
            let lu = up.accumulate_gradients(input.clone(), &gt, &anchors, &lp).unwrap().total();
            let ld = dn.accumulate_gradients(input.clone(), &gt, &anchors, &lp).unwrap().total();
            let fd = (lu - ld) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grads[idx].abs()).max(1e-4);
            assert!((fd - grads[idx]).abs() <= tol, "param {idx}: fd {fd} vs analytic {}", grads[idx]);
            checked += 1;
        }
        assert!(checked > 10);
    }
}
