use crate::error::{Error, Result};

pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct FocalLoss {
    pub loss: f64,
    /// Gradient with respect to the input (probabilities or logits), same
    /// layout as the input.
    pub grad: Vec<f64>,
}

/// Per-anchor term `-a (1-p)^g ln p` and its derivative in `p`, with `p`
/// clamped to `[eps, 1-eps]`.
fn term(p: f64, gamma: f64, alpha_t: f64) -> (f64, f64) {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let q = 1.0 - p;
    let lnp = p.ln();
    let qg = q.powf(gamma);
    let loss = -alpha_t * qg * lnp;
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * lnp };
    (loss, alpha_t * (dq - qg / p))
}

fn check(num_classes: usize, len: usize, labels: &[usize], background: usize, gamma: f64, alpha: f64) -> Result<()> {
    if num_classes == 0 || len != labels.len() * num_classes {
        return Err(Error::Shape {
            expected: format!("{} x {num_classes}", labels.len()),
            actual: format!("{len} values"),
        });
    }
    if labels.iter().any(|&l| l >= num_classes) || background >= num_classes {
        return Err(Error::InvalidArgument("focal loss label out of range".into()));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "focal loss needs gamma >= 0 and alpha in (0, 1], got {gamma}, {alpha}"
        )));
    }
    Ok(())
}

/// Focal loss averaged over anchors, from per-class probabilities.
///
/// `probs` holds one row of `num_classes` probabilities per anchor. An anchor
/// whose label equals `background` counts as a negative and is weighted by
/// `1 - alpha`; all others by `alpha`. The gradient is with respect to the
/// probabilities and is non-zero only at each row's true label.
pub fn focal_loss(
    probs: &[f64],
    num_classes: usize,
    labels: &[usize],
    background: usize,
    gamma: f64,
    alpha: f64,
) -> Result<FocalLoss> {
    check(num_classes, probs.len(), labels, background, gamma, alpha)?;
    let n = labels.len().max(1) as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let alpha_t = if label == background { 1.0 - alpha } else { alpha };
        let (l, d) = term(probs[i * num_classes + label], gamma, alpha_t);
        loss += l;
        grad[i * num_classes + label] = d / n;
    }
    Ok(FocalLoss { loss: loss / n, grad })
}

/// Focal loss on softmax logits, divided by `normalizer` instead of the anchor
/// count. This is what the detector heads train with.
pub fn focal_loss_logits(
    logits: &[f64],
    num_classes: usize,
    labels: &[usize],
    background: usize,
    gamma: f64,
    alpha: f64,
    normalizer: f64,
) -> Result<FocalLoss> {
    check(num_classes, logits.len(), labels, background, gamma, alpha)?;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let p = crate::nn::softmax(row);
        let alpha_t = if label == background { 1.0 - alpha } else { alpha };
        let (l, d) = term(p[label], gamma, alpha_t);
        loss += l;
        // dL/dz_j = dL/dp_t * p_t * (1[j = t] - p_j)
        let pt = p[label].clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let s = d * pt / normalizer;
        let g = &mut grad[i * num_classes..(i + 1) * num_classes];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = s * (f64::from(u8::from(j == label)) - p[j]);
        }
    }
    Ok(FocalLoss {
        loss: loss / normalizer,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_positive() {
        let r = focal_loss(&[0.5, 0.5], 2, &[1], 0, 2.0, 1.0).unwrap();
        assert!((r.loss - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((r.loss - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_is_nearly_free() {
        let r = focal_loss(&[FOCAL_EPS, 1.0 - FOCAL_EPS], 2, &[1], 0, 2.0, 0.25).unwrap();
        assert!(r.loss <= 1e-6);
        let r = focal_loss(&[0.0, 1.0], 2, &[1], 0, 0.0, 0.5).unwrap();
        assert!(r.loss.is_finite() && r.loss <= 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(focal_loss(&[0.5, 0.5, 0.1], 2, &[1], 0, 2.0, 0.25).is_err());
        assert!(focal_loss(&[0.5, 0.5], 2, &[2], 0, 2.0, 0.25).is_err());
        assert!(focal_loss(&[0.5, 0.5], 2, &[1], 0, -1.0, 0.25).is_err());
    }

    fn rows(raw: &[f64], k: usize) -> Vec<f64> {
        raw.chunks(k).flat_map(crate::nn::softmax).collect()
    }

    proptest! {
        #[test]
        fn gamma_zero_is_half_cross_entropy(raw in proptest::collection::vec(-4.0f64..4.0, 12), labels in proptest::collection::vec(0usize..4, 3)) {
            let p = rows(&raw, 4);
            let r = focal_loss(&p, 4, &labels, 0, 0.0, 0.5).unwrap();
            let ce: f64 = labels.iter().enumerate().map(|(i, &l)| -p[i * 4 + l].ln()).sum::<f64>() / 3.0;
            prop_assert!((r.loss - 0.5 * ce).abs() < 1e-9);
        }

        #[test]
        fn non_increasing_in_true_probability(a in 0.001f64..0.999, b in 0.001f64..0.999, gamma in 0.0f64..5.0, alpha in 0.05f64..0.95) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l_lo = focal_loss(&[1.0 - lo, lo], 2, &[1], 0, gamma, alpha).unwrap().loss;
            let l_hi = focal_loss(&[1.0 - hi, hi], 2, &[1], 0, gamma, alpha).unwrap().loss;
            prop_assert!(l_hi <= l_lo + 1e-15);
        }

        #[test]
        fn probability_gradient_matches_finite_differences(p in 0.01f64..0.99, gamma in 0.0f64..4.0, alpha in 0.05f64..0.95, label in 0usize..2) {
            let probs = [1.0 - p, p];
            let r = focal_loss(&probs, 2, &[label], 0, gamma, alpha).unwrap();
            let h = 1e-6;
            let mut up = probs;
            up[label] += h;
            let mut dn = probs;
            dn[label] -= h;
            let fd = (focal_loss(&up, 2, &[label], 0, gamma, alpha).unwrap().loss
                - focal_loss(&dn, 2, &[label], 0, gamma, alpha).unwrap().loss) / (2.0 * h);
            let an = r.grad[label];
            prop_assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "fd {} analytic {}", fd, an);
        }

        #[test]
        fn logit_gradient_matches_finite_differences(raw in proptest::collection::vec(-3.0f64..3.0, 8), labels in proptest::collection::vec(0usize..4, 2), gamma in 0.0f64..3.0) {
            let r = focal_loss_logits(&raw, 4, &labels, 0, gamma, 0.25, 2.0).unwrap();
            let h = 1e-6;
            for i in 0..raw.len() {
                let mut up = raw.clone();
                up[i] += h;
                let mut dn = raw.clone();
                dn[i] -= h;
                let fd = (focal_loss_logits(&up, 4, &labels, 0, gamma, 0.25, 2.0).unwrap().loss
                    - focal_loss_logits(&dn, 4, &labels, 0, gamma, 0.25, 2.0).unwrap().loss) / (2.0 * h);
                prop_assert!((fd - r.grad[i]).abs() <= 1e-4 * r.grad[i].abs().max(1e-3));
            }
        }
    }
}
