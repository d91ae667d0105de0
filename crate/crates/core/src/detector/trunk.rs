use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Residual, Sequential};

/// Convolutional trunk shared by every detector variant: 3x3 conv + ReLU
/// stages with 2x2 max pooling after each of the first three, then optional
/// residual blocks at the final width. Output stride is always 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub residual_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 48, 64, 64],
            residual_blocks: 0,
        }
    }
}

impl BackboneConfig {
    const POOLED_STAGES: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < Self::POOLED_STAGES || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs at least {} non-zero widths, got {:?}",
                Self::POOLED_STAGES,
                self.widths
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << Self::POOLED_STAGES
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// e.g. `conv16-32-48-64-64+res1`
    pub fn label(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let mut s = format!("conv{}", w.join("-"));
        if self.residual_blocks > 0 {
            s.push_str(&format!("+res{}", self.residual_blocks));
        }
        s
    }

    pub(crate) fn build(&self, rng: &mut impl Rng) -> Sequential {
        let mut layers = Vec::new();
        let mut c = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            layers.push(Layer::Conv(Conv2d::new(c, w, 3, 1, 1, rng)));
            layers.push(Layer::Relu);
            if i < Self::POOLED_STAGES {
                layers.push(Layer::MaxPool2);
            }
            c = w;
        }
        for _ in 0..self.residual_blocks {
            let body = Sequential::new(vec![
                Layer::Conv(Conv2d::new(c, c, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::Conv(Conv2d::with_std(c, c, 3, 1, 1, 0.1 * (2.0 / (9 * c) as f64).sqrt(), rng)),
            ]);
            layers.push(Layer::Residual(Box::new(Residual { body, shortcut: None })));
            layers.push(Layer::Relu);
        }
        Sequential::new(layers)
    }
}
