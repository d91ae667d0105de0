use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{gemm, ConvCache};
use super::{Conv2d, Param, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    MaxPool2,
    Residual(Box<Residual>),
}

/// `body(x) + shortcut(x)`, where a missing shortcut is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub body: Sequential,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub enum Cache {
    Conv(ConvCache),
    Relu(Vec<bool>),
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Residual { body: Vec<Cache>, shortcut: Option<ConvCache> },
}

impl Layer {
    pub fn forward(&self, x: Tensor, keep_cache: bool) -> (Tensor, Option<Cache>) {
        match self {
            Layer::Conv(conv) => {
                let (y, c) = conv.forward(&x, keep_cache);
                (y, c.map(Cache::Conv))
            }
            Layer::Relu => {
                let mut x = x;
                let mut mask = keep_cache.then(|| Vec::with_capacity(x.data.len()));
                for v in &mut x.data {
                    let on = *v > 0.0;
                    if !on {
                        *v = 0.0;
                    }
                    if let Some(m) = mask.as_mut() {
                        m.push(on);
                    }
                }
                (x, mask.map(Cache::Relu))
            }
            Layer::MaxPool2 => {
                let (c, h, w) = x.shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(c, oh, ow);
                let mut argmax = Vec::with_capacity(if keep_cache { c * oh * ow } else { 0 });
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                                    if x.data[idx] > best_v {
                                        best_v = x.data[idx];
                                        best = idx;
                                    }
                                }
                            }
                            *out.at_mut(ch, oy, ox) = best_v;
                            if keep_cache {
                                argmax.push(best);
                            }
                        }
                    }
                }
                let cache = keep_cache.then(|| Cache::MaxPool {
                    argmax,
                    in_shape: (c, h, w),
                });
                (out, cache)
            }
            Layer::Residual(block) => {
                let (sc, sc_cache) = match &block.shortcut {
                    Some(conv) => conv.forward(&x, keep_cache),
                    None => (x.clone(), None),
                };
                let (mut y, body_cache) = block.body.forward(x, keep_cache);
                y.add_assign(&sc);
                let cache = keep_cache.then(|| Cache::Residual {
                    body: body_cache.unwrap_or_default(),
                    shortcut: sc_cache,
                });
                (y, cache)
            }
        }
    }

    pub fn backward(&mut self, cache: &Cache, grad: Tensor, need_input_grad: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv(c)) => conv.backward(c, &grad, need_input_grad),
            (Layer::Relu, Cache::Relu(mask)) => {
                let mut g = grad;
                for (v, &on) in g.data.iter_mut().zip(mask) {
                    if !on {
                        *v = 0.0;
                    }
                }
                Some(g)
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                let (c, h, w) = *in_shape;
                let mut out = Tensor::zeros(c, h, w);
                for (&idx, &g) in argmax.iter().zip(&grad.data) {
                    out.data[idx] += g;
                }
                Some(out)
            }
            (Layer::Residual(block), Cache::Residual { body, shortcut }) => {
                let sc_grad = match (&mut block.shortcut, shortcut) {
                    (Some(conv), Some(c)) => conv.backward(c, &grad, need_input_grad),
                    (None, None) => Some(grad.clone()),
                    _ => panic!("residual cache does not match block"),
                };
                let body_grad = block.body.backward(body, grad, need_input_grad);
                match (body_grad, sc_grad) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        Some(a)
                    }
                    _ => None,
                }
            }
            _ => panic!("cache does not match layer"),
        }
    }

    /// (kernel, stride, pad) along the main path, for receptive-field arithmetic.
    /// Residual blocks report their body's composite geometry.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(c) => Some((c.kernel, c.stride, c.pad)),
            Layer::Relu => None,
            Layer::MaxPool2 => Some((2, 2, 0)),
            Layer::Residual(_) => None,
        }
    }

    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Layer::Conv(c) => {
                out.push(&c.weight);
                out.push(&c.bias);
            }
            Layer::Residual(b) => {
                for l in &b.body.layers {
                    l.collect_params(out);
                }
                if let Some(c) = &b.shortcut {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
            }
            _ => {}
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            Layer::Residual(b) => {
                for l in &mut b.body.layers {
                    l.collect_params_mut(out);
                }
                if let Some(c) = &mut b.shortcut {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: Tensor, keep_cache: bool) -> (Tensor, Option<Vec<Cache>>) {
        self.forward_range(0..self.layers.len(), x, keep_cache)
    }

    pub fn forward_range(
        &self,
        range: std::ops::Range<usize>,
        mut x: Tensor,
        keep_cache: bool,
    ) -> (Tensor, Option<Vec<Cache>>) {
        let mut caches = keep_cache.then(|| Vec::with_capacity(range.len()));
        for layer in &self.layers[range] {
            let (y, c) = layer.forward(x, keep_cache);
            if let (Some(all), Some(c)) = (caches.as_mut(), c) {
                all.push(c);
            }
            x = y;
        }
        (x, caches)
    }

    pub fn backward(&mut self, caches: &[Cache], grad: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = caches.len();
        self.backward_range(0..n, caches, grad, need_input_grad)
    }

    /// Backward through `layers[range]`; `caches` are the ones produced by
    /// the matching `forward_range`.
    pub fn backward_range(
        &mut self,
        range: std::ops::Range<usize>,
        caches: &[Cache],
        grad: Tensor,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        assert_eq!(range.len(), caches.len());
        let start = range.start;
        let mut g = grad;
        for (offset, cache) in caches.iter().enumerate().rev() {
            let first = offset == 0;
            // Past the first parameterised layer nothing upstream needs gradients.
            let need = need_input_grad || !first;
            match self.layers[start + offset].backward(cache, g, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}

impl Parameterized for Sequential {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_params(&mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.collect_params_mut(&mut out);
        }
        out
    }
}

/// Fully connected layer, `y = W x + b` with W of shape (outputs, inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            inputs,
            outputs,
            weight: Param::new((0..inputs * outputs).map(|_| normal.sample(rng)).collect()),
            bias: Param::new(vec![0.0; outputs]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs, "linear input size");
        let mut y = self.bias.value.clone();
        gemm(
            self.outputs,
            self.inputs,
            1,
            &self.weight.value,
            (self.inputs as isize, 1),
            x,
            (1, 1),
            &mut y,
            1.0,
        );
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &[f64], grad: &[f64]) -> Vec<f64> {
        for (o, &g) in grad.iter().enumerate() {
            self.bias.grad[o] += g;
            if g != 0.0 {
                let row = &mut self.weight.grad[o * self.inputs..(o + 1) * self.inputs];
                for (w, &xi) in row.iter_mut().zip(x) {
                    *w += g * xi;
                }
            }
        }
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        dx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn global_avg_pool(x: &Tensor) -> Vec<f64> {
    let n = x.plane() as f64;
    (0..x.channels).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(shape: (usize, usize, usize), grad: &[f64]) -> Tensor {
    let (c, h, w) = shape;
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad.iter().take(c) {
        data.extend(std::iter::repeat(g / n).take(h * w));
    }
    Tensor::new(c, h, w, data)
}

/// Spatial max per channel together with the flat index of the winner
/// (first occurrence on ties).
pub fn global_max_pool(x: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let p = x.plane();
    let mut values = Vec::with_capacity(x.channels);
    let mut argmax = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let (i, v) = x
            .channel(c)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        values.push(v);
        argmax.push(c * p + i);
    }
    (values, argmax)
}

pub fn global_max_pool_backward(shape: (usize, usize, usize), argmax: &[usize], grad: &[f64]) -> Tensor {
    let (c, h, w) = shape;
    let mut out = Tensor::zeros(c, h, w);
    for (&i, &g) in argmax.iter().zip(grad) {
        out.data[i] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng(seed, 3);
        Tensor::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn check_sequential_grads(mut net: Sequential, x: Tensor) {
        let (y, caches) = net.forward(x.clone(), true);
        let g = random(y.channels, y.height, y.width, 77);
        net.zero_grad();
        let dx = net.backward(&caches.unwrap(), g.clone(), true).unwrap();
        let loss = |n: &Sequential, x: &Tensor| -> f64 {
            let (y, _) = n.forward(x.clone(), false);
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-5, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        let grads = net.flat_grads();
        for i in (0..grads.len()).step_by(7) {
            let v = net.flat_values()[i];
            let mut np = net.clone();
            np.set_flat_value(i, v + eps);
            let mut nm = net.clone();
            nm.set_flat_value(i, v - eps);
            let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-5, "dw[{i}] {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn residual_stack_gradients() {
        let mut r = rng(5, 0);
        let block = Residual {
            body: Sequential::new(vec![
                Layer::Conv(Conv2d::new(4, 6, 3, 2, 1, &mut r)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(6, 6, 3, 1, 1, &mut r)),
            ]),
            shortcut: Some(Conv2d::new(4, 6, 1, 2, 0, &mut r)),
        };
        let identity = Residual {
            body: Sequential::new(vec![Layer::Conv(Conv2d::new(6, 6, 3, 1, 1, &mut r))]),
            shortcut: None,
        };
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 4, 3, 1, 1, &mut r)),
            Layer::Relu,
            Layer::Residual(Box::new(block)),
            Layer::Relu,
            Layer::Residual(Box::new(identity)),
            Layer::MaxPool2,
        ]);
        check_sequential_grads(net, random(2, 8, 8, 1));
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(6, 0);
        let mut lin = Linear::new(5, 3, &mut r);
        let x = vec![0.3, -0.2, 0.9, 0.1, -0.7];
        let g = vec![0.5, -1.0, 2.0];
        let dx = lin.backward(&x, &g);
        let loss = |l: &Linear, x: &[f64]| -> f64 { l.forward(x).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let eps = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            assert!(((loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps) - dx[i]).abs() < 1e-8);
        }
        assert_eq!(lin.bias.grad, g);
    }

    #[test]
    fn max_pool_picks_largest() {
        let x = Tensor::new(1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]);
        let (y, _) = Layer::MaxPool2.forward(x, false);
        assert_eq!(y.data, vec![5.0, 7.0]);
    }

    #[test]
    fn global_pools() {
        let x = Tensor::new(2, 1, 3, vec![1.0, 2.0, 3.0, -1.0, 4.0, 0.0]);
        assert_eq!(global_avg_pool(&x), vec![2.0, 1.0]);
        let (v, idx) = global_max_pool(&x);
        assert_eq!(v, vec![3.0, 4.0]);
        assert_eq!(idx, vec![2, 4]);
    }
}
