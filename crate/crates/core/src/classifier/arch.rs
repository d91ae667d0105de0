use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, softmax_cross_entropy,
    Conv2d, Layer, Linear, Param, Parameterized, Residual, Sequential, Tensor,
};

/// Size, stride and left edge (in input pixels, for output index 0) of the
/// receptive field of a stack of layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub stride: usize,
    pub offset: isize,
}

impl ReceptiveField {
    const IDENTITY: ReceptiveField = ReceptiveField {
        size: 1,
        stride: 1,
        offset: 0,
    };

    /// Input interval `[start, end)` seen by output position `index`.
    pub fn patch(&self, index: usize) -> (isize, isize) {
        let start = self.offset + (index * self.stride) as isize;
        (start, start + self.size as isize)
    }

    fn then(self, kernel: usize, stride: usize, pad: usize) -> Self {
        ReceptiveField {
            size: self.size + (kernel - 1) * self.stride,
            stride: self.stride * stride,
            offset: self.offset - (pad * self.stride) as isize,
        }
    }
}

/// Receptive field after `layers`. Residual blocks take the wider of their
/// body and shortcut paths.
pub fn receptive_field(layers: &[Layer]) -> ReceptiveField {
    layers.iter().fold(ReceptiveField::IDENTITY, extend)
}

fn extend(rf: ReceptiveField, layer: &Layer) -> ReceptiveField {
    match layer {
        Layer::Conv(c) => rf.then(c.kernel, c.stride, c.pad),
        Layer::MaxPool2 => rf.then(2, 2, 0),
        Layer::Relu => rf,
        Layer::Residual(block) => {
            let body = block.body.layers.iter().fold(rf, extend);
            let short = block.shortcut.as_ref().map_or(rf, |c| rf.then(c.kernel, c.stride, c.pad));
            debug_assert_eq!(body.stride, short.stride);
            if body.size >= short.size {
                body
            } else {
                short
            }
        }
    }
}

fn conv(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Layer {
    Layer::Conv(Conv2d::new(c_in, c_out, 3, 1, 1, rng))
}

fn residual(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Layer {
    let body = Sequential::new(vec![
        conv(c_in, c_out, rng),
        Layer::Relu,
        Layer::Conv(Conv2d::with_std(c_out, c_out, 3, 1, 1, 0.5 * (2.0 / (9 * c_out) as f64).sqrt(), rng)),
    ]);
    let shortcut = (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, rng));
    Layer::Residual(Box::new(Residual { body, shortcut }))
}

/// Plain conv/ReLU stages; `stages[i]` is (width, number of convs) and every
/// stage but the last ends in 2x2 max pooling.
fn plain(stages: &[(usize, usize)], rng: &mut impl Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c = 3;
    for (i, &(w, n)) in stages.iter().enumerate() {
        for _ in 0..n {
            layers.push(conv(c, w, rng));
            layers.push(Layer::Relu);
            c = w;
        }
        if i + 1 < stages.len() {
            layers.push(Layer::MaxPool2);
        }
    }
    layers
}

pub(crate) struct BuiltBackbone {
    pub layers: Vec<Layer>,
    /// Index of the layer whose output is the default filter-bank tap.
    pub default_tap: usize,
    pub out_channels: usize,
}

/// All three backbones reach a 92-pixel receptive field at stride 8 at their
/// default tap, followed by one more pooled stage feeding the global average.
pub(crate) fn build_backbone(backbone: Backbone, rng: &mut impl Rng) -> BuiltBackbone {
    let mut layers = match backbone {
        Backbone::Small => plain(&[(8, 2), (16, 2), (24, 1), (32, 4)], rng),
        Backbone::Medium => plain(&[(16, 2), (32, 2), (48, 3), (64, 3)], rng),
        Backbone::Residual => vec![
            residual(3, 16, rng),
            Layer::Relu,
            Layer::MaxPool2,
            residual(16, 32, rng),
            Layer::Relu,
            Layer::MaxPool2,
            conv(32, 48, rng),
            Layer::Relu,
            residual(48, 48, rng),
            Layer::Relu,
            Layer::MaxPool2,
            conv(48, 64, rng),
            Layer::Relu,
            residual(64, 64, rng),
            Layer::Relu,
        ],
    };
    let default_tap = layers.len() - 1;
    let tap_channels = match backbone {
        Backbone::Small => 32,
        _ => 64,
    };
    let out_channels = tap_channels + 32;
    layers.push(Layer::MaxPool2);
    layers.push(conv(tap_channels, out_channels, rng));
    layers.push(Layer::Relu);
    BuiltBackbone {
        layers,
        default_tap,
        out_channels,
    }
}

/// Output channels of the feature map produced by `layers`.
pub(crate) fn channels_after(layers: &[Layer], input: usize) -> usize {
    layers.iter().fold(input, |c, l| match l {
        Layer::Conv(conv) => conv.out_channels,
        Layer::Residual(b) => b
            .body
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.out_channels),
                _ => None,
            })
            .unwrap_or(c),
        _ => c,
    })
}

/// 1x1 filters over the tap map, reduced by spatial max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct FilterBank {
    pub tap: usize,
    pub filters_per_class: usize,
    pub conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ClassifierNet {
    pub features: Sequential,
    pub bank: Option<FilterBank>,
    pub head: Linear,
    /// Length of the pooled backbone feature (head input without the bank).
    pub feature_dim: usize,
}

pub(crate) const NUM_LABELS: usize = 2;

impl ClassifierNet {
    pub fn new(backbone: Backbone, rng: &mut impl Rng) -> Self {
        let built = build_backbone(backbone, rng);
        Self {
            features: Sequential::new(built.layers),
            bank: None,
            head: Linear::new(built.out_channels, NUM_LABELS, rng),
            feature_dim: built.out_channels,
        }
    }

    /// Adds a bank of `2 * filters_per_class` 1x1 filters on layer `tap` and
    /// widens the head; the original head weights are kept and the new
    /// columns start at zero.
    pub fn attach_bank(&mut self, tap: usize, filters_per_class: usize, rng: &mut impl Rng) -> Result<()> {
        if tap >= self.features.layers.len() {
            return Err(Error::Config(format!(
                "tap layer {tap} does not exist (backbone has {} layers)",
                self.features.layers.len()
            )));
        }
        if filters_per_class == 0 {
            self.bank = None;
            return Ok(());
        }
        let c = channels_after(&self.features.layers[..=tap], 3);
        let n = NUM_LABELS * filters_per_class;
        let conv = Conv2d::with_std(c, n, 1, 1, 0, (1.0 / c as f64).sqrt(), rng);
        let old = &self.head;
        let mut weight = Vec::with_capacity(NUM_LABELS * (self.feature_dim + n));
        for o in 0..NUM_LABELS {
            weight.extend_from_slice(&old.weight.value[o * old.inputs..(o + 1) * old.inputs]);
            weight.extend(std::iter::repeat(0.0).take(n));
        }
        self.head = Linear {
            inputs: self.feature_dim + n,
            outputs: NUM_LABELS,
            weight: Param::new(weight),
            bias: Param::new(old.bias.value.clone()),
        };
        self.bank = Some(FilterBank {
            tap,
            filters_per_class,
            conv,
        });
        Ok(())
    }

    fn split(&self) -> usize {
        self.bank.as_ref().map_or(self.features.layers.len(), |b| b.tap + 1)
    }

    /// Tap-layer activations for an input.
    pub fn tap_features(&self, x: Tensor, tap: usize) -> Tensor {
        self.features.forward_range(0..tap + 1, x, false).0
    }

    fn aux_of(m: &[f64], fpc: usize) -> Vec<f64> {
        (0..NUM_LABELS)
            .map(|k| m[k * fpc..(k + 1) * fpc].iter().sum::<f64>() / fpc as f64)
            .collect()
    }

    /// Two-class logits.
    pub fn forward(&self, x: Tensor) -> Vec<f64> {
        let split = self.split();
        let n = self.features.layers.len();
        let (t, _) = self.features.forward_range(0..split, x, false);
        let (f, _) = self.features.forward_range(split..n, t.clone(), false);
        let mut head_in = global_avg_pool(&f);
        if let Some(bank) = &self.bank {
            let (r, _) = bank.conv.forward(&t, false);
            head_in.extend(global_max_pool(&r).0);
        }
        self.head.forward(&head_in)
    }

    /// Weighted cross-entropy (+ auxiliary loss on the bank) for one sample;
    /// accumulates gradients and returns `(loss, logits)`.
    pub fn accumulate_gradients(&mut self, x: Tensor, label: usize, weight: f64, aux_weight: f64) -> (f64, Vec<f64>) {
        let split = self.split();
        let n = self.features.layers.len();
        let (t, pre) = self.features.forward_range(0..split, x, true);
        let (f, post) = self.features.forward_range(split..n, t.clone(), true);
        let f_shape = f.shape();
        let mut head_in = global_avg_pool(&f);
        let mut bank_state = None;
        if let Some(bank) = &self.bank {
            let (r, cache) = bank.conv.forward(&t, true);
            let (m, argmax) = global_max_pool(&r);
            head_in.extend_from_slice(&m);
            bank_state = Some((cache.expect("cache"), r.shape(), m, argmax));
        }
        let logits = self.head.forward(&head_in);
        let (mut loss, dlogits) = softmax_cross_entropy(&logits, label, weight);
        let dhead = self.head.backward(&head_in, &dlogits);
        let dg = &dhead[..self.feature_dim];
        let df = global_avg_pool_backward(f_shape, dg);
        let mut dt = self
            .features
            .backward_range(split..n, post.as_deref().unwrap_or(&[]), df, true)
            .expect("input grad");
        if let (Some(bank), Some((cache, r_shape, m, argmax))) = (self.bank.as_mut(), bank_state) {
            let fpc = bank.filters_per_class;
            let mut dm = dhead[self.feature_dim..].to_vec();
            if aux_weight > 0.0 {
                let aux = Self::aux_of(&m, fpc);
                let (la, da) = softmax_cross_entropy(&aux, label, weight * aux_weight);
                loss += la;
                for (k, d) in da.iter().enumerate() {
                    for v in &mut dm[k * fpc..(k + 1) * fpc] {
                        *v += d / fpc as f64;
                    }
                }
            }
            let dr = global_max_pool_backward(r_shape, &argmax, &dm);
            dt.add_assign(&bank.conv.backward(&cache, &dr, true).expect("input grad"));
        }
        self.features
            .backward_range(0..split, pre.as_deref().unwrap_or(&[]), dt, false);
        (loss, logits)
    }
}

impl Parameterized for ClassifierNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.features.params();
        if let Some(b) = &self.bank {
            v.extend([&b.conv.weight, &b.conv.bias]);
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.features.params_mut();
        if let Some(b) = &mut self.bank {
            v.extend([&mut b.conv.weight, &mut b.conv.bias]);
        }
        v.extend(self.head.params_mut());
        v
    }
}
