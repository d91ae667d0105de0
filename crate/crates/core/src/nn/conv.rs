use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Param, Tensor};

/// 2-D convolution, square kernel, zero padding. Lowered to a matrix
/// product over an im2col buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out, in, k, k) row-major.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    /// im2col buffer (in*k*k, out_h*out_w); empty for pointwise convs, which
    /// keep the input instead.
    cols: Vec<f64>,
    input: Option<Vec<f64>>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal initialised convolution with zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self::with_std(in_channels, out_channels, kernel, stride, pad, std, rng)
    }

    pub fn with_std(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = out_channels * in_channels * kernel * kernel;
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Tensor, keep_cache: bool) -> (Tensor, Option<ConvCache>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let cols_vec = (!pointwise).then(|| self.im2col(x, oh, ow));
        let cols: &[f64] = cols_vec.as_deref().unwrap_or(&x.data);
        let mut out = vec![0.0; self.out_channels * n];
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(self.bias.value[o]);
        }
        gemm(
            self.out_channels,
            kk,
            n,
            &self.weight.value,
            (kk as isize, 1),
            cols,
            (n as isize, 1),
            &mut out,
            1.0,
        );
        let cache = keep_cache.then(|| ConvCache {
            input: pointwise.then(|| x.data.clone()),
            cols: cols_vec.unwrap_or_default(),
            in_shape: x.shape(),
        });
        (Tensor::new(self.out_channels, oh, ow, out), cache)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = grad_out.plane();
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols: &[f64] = match &cache.input {
            Some(input) => input,
            None => &cache.cols,
        };
        for (o, g) in grad_out.data.chunks(n).enumerate() {
            self.bias.grad[o] += g.iter().sum::<f64>();
        }
        // dW (out, kk) += dY (out, n) * cols^T (n, kk)
        gemm(
            self.out_channels,
            n,
            kk,
            &grad_out.data,
            (n as isize, 1),
            cols,
            (1, n as isize),
            &mut self.weight.grad,
            1.0,
        );
        if !need_input_grad {
            return None;
        }
        // dcols (kk, n) = W^T (kk, out) * dY (out, n)
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            self.out_channels,
            n,
            &self.weight.value,
            (1, kk as isize),
            &grad_out.data,
            (n as isize, 1),
            &mut dcols,
            0.0,
        );
        let (c, h, w) = cache.in_shape;
        if self.is_pointwise() {
            return Some(Tensor::new(c, h, w, dcols));
        }
        Some(self.col2im(&dcols, cache.in_shape, grad_out.height, grad_out.width))
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        let (h, w) = (x.height as isize, x.width as isize);
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..self.in_channels {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let dst = &mut cols[row..row + n];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], (c_in, h, w): (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Tensor::zeros(c_in, h, w);
        let (hi, wi) = (h as isize, w as isize);
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let src = &dcols[row..row + n];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= hi {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < wi {
                                out.data[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// C (m, n) = beta * C + A (m, k) * B (k, n), with arbitrary strides on A and B
/// and a contiguous row-major C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the caller-provided strides address only elements inside `a`
    // (m x k) and `b` (k x n); `c` holds at least m * n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
