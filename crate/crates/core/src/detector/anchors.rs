use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Three scales times three aspect ratios, tiled every `stride` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor side lengths in pixels (anchor area is `scale^2`).
    pub scales: [f64; 3],
    /// Height / width ratios.
    pub aspect_ratios: [f64; 3],
    pub stride: usize,
}

impl AnchorConfig {
    pub const PER_LOCATION: usize = 9;

    pub fn validate(&self) -> Result<()> {
        let ok = self.scales.iter().chain(&self.aspect_ratios).all(|v| *v > 0.0 && v.is_finite());
        if !ok || self.stride == 0 {
            return Err(Error::Config(format!("invalid anchor config {self:?}")));
        }
        Ok(())
    }
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: [20.0, 32.0, 52.0],
            aspect_ratios: [0.5, 1.0, 2.0],
            stride: 8,
        }
    }
}

/// Anchors for a `rows x cols` feature map.
///
/// Ordering is row, column, scale, ratio: the anchor with scale `s` and ratio
/// `r` at location `(i, j)` has index `((i * cols + j) * 3 + s) * 3 + r`. It is
/// centred at `((j + 0.5) * stride, (i + 0.5) * stride)` with width
/// `scale / sqrt(ratio)` and height `scale * sqrt(ratio)`. Anchors near the
/// border may extend past the image and are not clipped.
pub fn generate_anchors((rows, cols): (usize, usize), config: &AnchorConfig) -> Vec<BoundingBox> {
    let stride = config.stride as f64;
    let mut shapes = Vec::with_capacity(AnchorConfig::PER_LOCATION);
    for &s in &config.scales {
        for &r in &config.aspect_ratios {
            let sr = r.sqrt();
            shapes.push((s / sr, s * sr));
        }
    }
    let mut out = Vec::with_capacity(rows * cols * AnchorConfig::PER_LOCATION);
    for i in 0..rows {
        let cy = (i as f64 + 0.5) * stride;
        for j in 0..cols {
            let cx = (j as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BoundingBox {
                    x_min: cx - 0.5 * w,
                    y_min: cy - 0.5 * h,
                    x_max: cx + 0.5 * w,
                    y_max: cy + 0.5 * h,
                });
            }
        }
    }
    out
}
