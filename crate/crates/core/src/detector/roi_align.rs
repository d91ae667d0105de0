use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One bilinear tap: four corner offsets into a plane with their weights.
#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

/// Bilinear weights at continuous position `(y, x)`, where feature cell
/// `(i, j)` is centred at `(i + 0.5, j + 0.5)`. Samples more than one cell
/// outside the map contribute nothing.
fn tap(y: f64, x: f64, h: usize, w: usize) -> Option<Tap> {
    let (mut y, mut x) = (y - 0.5, x - 0.5);
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let (y0, y1, ly) = if y >= (h - 1) as f64 {
        (h - 1, h - 1, 0.0)
    } else {
        let y0 = y.floor() as usize;
        (y0, y0 + 1, y - y0 as f64)
    };
    let (x0, x1, lx) = if x >= (w - 1) as f64 {
        (w - 1, w - 1, 0.0)
    } else {
        let x0 = x.floor() as usize;
        (x0, x0 + 1, x - x0 as f64)
    };
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some(Tap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [hy * hx, hy * lx, ly * hx, ly * lx],
    })
}

/// Precomputed sampling pattern for one box, reused by forward and backward.
#[derive(Debug, Clone)]
pub struct RoiSampling {
    out_h: usize,
    out_w: usize,
    /// Per output bin, its taps; each already divided by the sample count.
    bins: Vec<Vec<Tap>>,
}

pub fn roi_sampling(
    feature_shape: (usize, usize),
    bbox: &BoundingBox,
    (out_h, out_w): (usize, usize),
    samples_per_bin: usize,
) -> Result<RoiSampling> {
    let (h, w) = feature_shape;
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("roi_align sizes must be positive".into()));
    }
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate roi {:?}", bbox.to_array())));
    }
    if bbox.x_max <= 0.0 || bbox.y_max <= 0.0 || bbox.x_min >= w as f64 || bbox.y_min >= h as f64 {
        return Err(Error::InvalidArgument(format!(
            "roi {:?} does not intersect a {h}x{w} feature map",
            bbox.to_array()
        )));
    }
    let bin_h = bbox.height() / out_h as f64;
    let bin_w = bbox.width() / out_w as f64;
    let s = samples_per_bin as f64;
    let norm = 1.0 / (s * s);
    let mut bins = Vec::with_capacity(out_h * out_w);
    for by in 0..out_h {
        for bx in 0..out_w {
            let mut taps = Vec::with_capacity(samples_per_bin * samples_per_bin);
            for sy in 0..samples_per_bin {
                let y = bbox.y_min + (by as f64 + (sy as f64 + 0.5) / s) * bin_h;
                for sx in 0..samples_per_bin {
                    let x = bbox.x_min + (bx as f64 + (sx as f64 + 0.5) / s) * bin_w;
                    if let Some(mut t) = tap(y, x, h, w) {
                        t.w.iter_mut().for_each(|v| *v *= norm);
                        taps.push(t);
                    }
                }
            }
            bins.push(taps);
        }
    }
    Ok(RoiSampling { out_h, out_w, bins })
}

impl RoiSampling {
    pub fn forward(&self, feature: &Tensor) -> Tensor {
        let p = feature.plane();
        let n = self.out_h * self.out_w;
        let mut out = Tensor::zeros(feature.channels, self.out_h, self.out_w);
        for c in 0..feature.channels {
            let plane = &feature.data[c * p..(c + 1) * p];
            for (b, taps) in self.bins.iter().enumerate() {
                let mut acc = 0.0;
                for t in taps {
                    for k in 0..4 {
                        acc += t.w[k] * plane[t.idx[k]];
                    }
                }
                out.data[c * n + b] = acc;
            }
        }
        out
    }

    /// Adds the gradient of the pooled output into `feature_grad`.
    pub fn backward(&self, grad_out: &Tensor, feature_grad: &mut Tensor) {
        let p = feature_grad.plane();
        let n = self.out_h * self.out_w;
        for c in 0..feature_grad.channels {
            let plane = &mut feature_grad.data[c * p..(c + 1) * p];
            for (b, taps) in self.bins.iter().enumerate() {
                let g = grad_out.data[c * n + b];
                if g == 0.0 {
                    continue;
                }
                for t in taps {
                    for k in 0..4 {
                        plane[t.idx[k]] += t.w[k] * g;
                    }
                }
            }
        }
    }
}

/// Pools the region `bbox` (feature-map coordinates) of `feature` into a
/// fixed `output_size` grid. Each bin averages `samples_per_bin^2`
/// bilinear samples at evenly spaced sub-bin positions; nothing is rounded.
pub fn roi_align(
    feature: &Tensor,
    bbox: &BoundingBox,
    output_size: (usize, usize),
    samples_per_bin: usize,
) -> Result<Tensor> {
    Ok(roi_sampling((feature.height, feature.width), bbox, output_size, samples_per_bin)?.forward(feature))
}
