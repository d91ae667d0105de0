use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::assign::assign_boxes;
use super::boxcoder::{decode_scaled, encode_scaled};
use super::nms::{nms_indices, rank_by_score};
use super::roi_align::roi_sampling;
use super::single_stage::{LossParams, LossParts, NUM_OUTPUTS};
use super::trunk::BackboneConfig;
use super::{clipped_detection, generate_anchors, AnchorConfig, Detection};
use crate::data::{Annotation, BoundingBox, ObjectClass};
use crate::error::Result;
use crate::nn::{smooth_l1, softmax, softmax_cross_entropy, Conv2d, Linear, Param, Parameterized, Sequential, Tensor};

const A: usize = AnchorConfig::PER_LOCATION;
const POOL: usize = 4;
const HIDDEN: usize = 128;
const PROPOSAL_NMS: f64 = 0.7;
const MIN_PROPOSAL_SIDE: f64 = 2.0;

/// Sampling caps for the two training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sampling {
    /// Anchors sampled per image for the proposal loss.
    pub rpn_batch: usize,
    /// Proposals sampled per image for the second stage.
    pub roi_batch: usize,
}

/// Proposal network over the trunk, then ROI-Align pooling of each proposal
/// into a fixed grid and a fully connected class + box head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TwoStageNet {
    trunk: Sequential,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_reg: Conv2d,
    fc: Linear,
    cls: Linear,
    reg: Linear,
    stride: usize,
    samples_per_bin: usize,
    train_proposals: usize,
    test_proposals: usize,
}

struct RpnOut {
    feat: Tensor,
    obj: Tensor,
    reg: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit: `(loss, dloss/dlogit)`.
fn bce(logit: f64, positive: bool) -> (f64, f64) {
    let y = if positive { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

impl TwoStageNet {
    pub fn new(backbone: &BackboneConfig, samples_per_bin: usize, rng: &mut impl Rng) -> Self {
        let trunk = backbone.build(rng);
        let f = backbone.out_channels();
        let rpn_conv = Conv2d::new(f, f, 3, 1, 1, rng);
        let mut rpn_obj = Conv2d::with_std(f, A, 1, 1, 0, 0.01, rng);
        rpn_obj.bias.value.fill(-4.0);
        let rpn_reg = Conv2d::with_std(f, A * 4, 1, 1, 0, 0.01, rng);
        let fc = Linear::new(f * POOL * POOL, HIDDEN, rng);
        let mut cls = Linear::new(HIDDEN, NUM_OUTPUTS, rng);
        cls.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        let mut reg = Linear::new(HIDDEN, 4, rng);
        reg.weight.value.iter_mut().for_each(|w| *w *= 0.01);
        Self {
            trunk,
            rpn_conv,
            rpn_obj,
            rpn_reg,
            fc,
            cls,
            reg,
            stride: backbone.stride(),
            samples_per_bin,
            train_proposals: 128,
            test_proposals: 64,
        }
    }

    fn rpn(&self, feat: Tensor) -> RpnOut {
        let (mut hidden, _) = self.rpn_conv.forward(&feat, false);
        hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let (obj, _) = self.rpn_obj.forward(&hidden, false);
        let (reg, _) = self.rpn_reg.forward(&hidden, false);
        RpnOut { feat, obj, reg }
    }

    /// Decoded, clipped proposals after NMS, best first.
    fn proposals(&self, out: &RpnOut, anchors: &AnchorConfig, (w, h): (f64, f64), limit: usize) -> Vec<BoundingBox> {
        let (rows, cols) = (out.obj.height, out.obj.width);
        let grid = generate_anchors((rows, cols), anchors);
        let mut boxes = Vec::with_capacity(grid.len());
        let mut scores = Vec::with_capacity(grid.len());
        for (ai, anchor) in grid.iter().enumerate() {
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            let deltas = [0, 1, 2, 3].map(|c| out.reg.at(a * 4 + c, i, j));
            let b = decode_scaled(anchor, deltas).clip(w, h);
            if b.is_valid() && b.width() >= MIN_PROPOSAL_SIDE && b.height() >= MIN_PROPOSAL_SIDE {
                boxes.push(b);
                scores.push(out.obj.at(a, i, j));
            }
        }
        let mut order = rank_by_score(&scores, |s| *s);
        order.truncate(6 * limit);
        nms_indices(&boxes, &order, PROPOSAL_NMS, limit)
            .into_iter()
            .map(|i| boxes[i])
            .collect()
    }

    fn feature_box(&self, b: &BoundingBox) -> BoundingBox {
        b.scale(1.0 / self.stride as f64)
    }

    /// Second-stage head on one proposal: `(pooled, hidden, logits, deltas)`.
    fn head(&self, feat: &Tensor, roi: &BoundingBox) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let s = roi_sampling((feat.height, feat.width), &self.feature_box(roi), (POOL, POOL), self.samples_per_bin)?;
        let pooled = s.forward(feat).data;
        let mut hidden = self.fc.forward(&pooled);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.cls.forward(&hidden);
        let deltas = self.reg.forward(&hidden);
        Ok((pooled, hidden, logits, deltas))
    }

    pub fn candidates(&self, input: Tensor, anchors: &AnchorConfig, size: (f64, f64), score_threshold: f64) -> Vec<Detection> {
        let (feat, _) = self.trunk.forward(input, false);
        let out = self.rpn(feat);
        let mut dets = Vec::new();
        for roi in self.proposals(&out, anchors, size, self.test_proposals) {
            let Ok((_, _, logits, deltas)) = self.head(&out.feat, &roi) else {
                continue;
            };
            let p = softmax(&logits);
            let decoded = decode_scaled(&roi, [deltas[0], deltas[1], deltas[2], deltas[3]]);
            for (k, &score) in p.iter().enumerate().skip(1) {
                if score < score_threshold {
                    continue;
                }
                let class = ObjectClass::from_code(k - 1).expect("class index");
                if let Some(d) = clipped_detection(decoded, size, class, score) {
                    if d.score >= score_threshold {
                        dets.push(d);
                    }
                }
            }
        }
        dets
    }

    pub fn accumulate_gradients(
        &mut self,
        input: Tensor,
        gt: &[Annotation],
        anchors: &AnchorConfig,
        lp: &LossParams,
        sampling: &Sampling,
        rng: &mut impl Rng,
    ) -> Result<LossParts> {
        let size = (input.width as f64, input.height as f64);
        let (feat, trunk_cache) = self.trunk.forward(input, true);
        let (pre, conv_cache) = self.rpn_conv.forward(&feat, true);
        let mut hidden = pre;
        let mask: Vec<bool> = hidden.data.iter().map(|&v| v > 0.0).collect();
        hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let (obj, obj_cache) = self.rpn_obj.forward(&hidden, true);
        let (reg, reg_cache) = self.rpn_reg.forward(&hidden, true);
        let out = RpnOut { feat, obj, reg };
        let (rows, cols) = (out.obj.height, out.obj.width);
        let gt_boxes: Vec<BoundingBox> = gt.iter().map(|a| a.bbox).collect();

        // Proposal network loss on a sampled anchor subset.
        let grid = generate_anchors((rows, cols), anchors);
        let assignment = assign_boxes(&grid, &gt_boxes, lp.iou_neg, lp.iou_pos);
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (ai, (a, _)) in assignment.iter().enumerate() {
            match a {
                Some((_, true)) => pos.push(ai),
                None => neg.push(ai),
                Some((_, false)) => {}
            }
        }
        pos.shuffle(rng);
        pos.truncate(sampling.rpn_batch / 2);
        neg.shuffle(rng);
        neg.truncate(sampling.rpn_batch - pos.len());
        let sampled = (pos.len() + neg.len()).max(1) as f64;
        let box_norm = pos.len().max(1) as f64;
        let mut dobj = Tensor::zeros(A, rows, cols);
        let mut dreg = Tensor::zeros(A * 4, rows, cols);
        let mut rpn_cls = 0.0;
        let mut rpn_box = 0.0;
        for (&ai, positive) in pos.iter().map(|a| (a, true)).chain(neg.iter().map(|a| (a, false))) {
            let (loc, a) = (ai / A, ai % A);
            let (i, j) = (loc / cols, loc % cols);
            let (l, g) = bce(out.obj.at(a, i, j), positive);
            rpn_cls += l / sampled;
            *dobj.at_mut(a, i, j) = g / sampled;
            if positive {
                let gi = assignment[ai].0.expect("positive").0;
                let target = encode_scaled(&grid[ai], &gt_boxes[gi]);
                let pred = [0, 1, 2, 3].map(|c| out.reg.at(a * 4 + c, i, j));
                let (l, g) = smooth_l1(&pred, &target, lp.box_beta);
                rpn_box += lp.box_weight * l / box_norm;
                for c in 0..4 {
                    *dreg.at_mut(a * 4 + c, i, j) = lp.box_weight * g[c] / box_norm;
                }
            }
        }

        // Second stage on sampled proposals plus the ground-truth boxes.
        let mut rois = self.proposals(&out, anchors, size, self.train_proposals);
        rois.extend(gt_boxes.iter().copied());
        let labels = assign_boxes(&rois, &gt_boxes, 0.5, 0.5);
        let mut fg: Vec<usize> = Vec::new();
        let mut bg: Vec<usize> = Vec::new();
        for (ri, (a, _)) in labels.iter().enumerate() {
            match a {
                Some((_, true)) => fg.push(ri),
                _ => bg.push(ri),
            }
        }
        fg.shuffle(rng);
        fg.truncate(sampling.roi_batch / 4);
        bg.shuffle(rng);
        bg.truncate(sampling.roi_batch - fg.len());
        let chosen: Vec<(usize, bool)> = fg.iter().map(|&r| (r, true)).chain(bg.iter().map(|&r| (r, false))).collect();
        let n_roi = chosen.len().max(1) as f64;
        let mut dfeat = Tensor::zeros(out.feat.channels, out.feat.height, out.feat.width);
        let mut head_cls = 0.0;
        let mut head_box = 0.0;
        for (ri, is_fg) in chosen {
            let roi = rois[ri];
            let s = roi_sampling(
                (out.feat.height, out.feat.width),
                &self.feature_box(&roi),
                (POOL, POOL),
                self.samples_per_bin,
            )?;
            let pooled = s.forward(&out.feat).data;
            let pre = self.fc.forward(&pooled);
            let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let logits = self.cls.forward(&hidden);
            let deltas = self.reg.forward(&hidden);
            let target_class = if is_fg {
                let gi = labels[ri].0.expect("fg").0;
                gt[gi].object_class.code() + 1
            } else {
                0
            };
            let (l, g) = softmax_cross_entropy(&logits, target_class, 1.0 / n_roi);
            head_cls += l;
            let mut dhidden = self.cls.backward(&hidden, &g);
            if is_fg {
                let gi = labels[ri].0.expect("fg").0;
                let target = encode_scaled(&roi, &gt_boxes[gi]);
                let (l, g) = smooth_l1(&deltas, &target, lp.box_beta);
                head_box += lp.box_weight * l / n_roi;
                let g: Vec<f64> = g.iter().map(|v| lp.box_weight * v / n_roi).collect();
                for (d, v) in dhidden.iter_mut().zip(self.reg.backward(&hidden, &g)) {
                    *d += v;
                }
            }
            for (d, p) in dhidden.iter_mut().zip(&pre) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
            let dpooled = self.fc.backward(&pooled, &dhidden);
            s.backward(&Tensor::new(out.feat.channels, POOL, POOL, dpooled), &mut dfeat);
        }

        let parts = LossParts {
            classification: rpn_cls + head_cls,
            regression: rpn_box + head_box,
        };
        if !parts.total().is_finite() {
            return Ok(parts);
        }
        let mut dhid = self.rpn_obj.backward(&obj_cache.expect("cache"), &dobj, true).expect("grad");
        dhid.add_assign(&self.rpn_reg.backward(&reg_cache.expect("cache"), &dreg, true).expect("grad"));
        for (d, on) in dhid.data.iter_mut().zip(&mask) {
            if !on {
                *d = 0.0;
            }
        }
        dfeat.add_assign(&self.rpn_conv.backward(&conv_cache.expect("cache"), &dhid, true).expect("grad"));
        self.trunk.backward(&trunk_cache.expect("cache"), dfeat, false);
        Ok(parts)
    }
}

impl Parameterized for TwoStageNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.trunk.params();
        v.extend([
            &self.rpn_conv.weight,
            &self.rpn_conv.bias,
            &self.rpn_obj.weight,
            &self.rpn_obj.bias,
            &self.rpn_reg.weight,
            &self.rpn_reg.bias,
        ]);
        v.extend(self.fc.params());
        v.extend(self.cls.params());
        v.extend(self.reg.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.trunk.params_mut();
        v.extend([
            &mut self.rpn_conv.weight,
            &mut self.rpn_conv.bias,
            &mut self.rpn_obj.weight,
            &mut self.rpn_obj.bias,
            &mut self.rpn_reg.weight,
            &mut self.rpn_reg.bias,
        ]);
        v.extend(self.fc.params_mut());
        v.extend(self.cls.params_mut());
        v.extend(self.reg.params_mut());
        v
    }
}
