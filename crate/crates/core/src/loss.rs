//! Pixel-wise cross-entropy with ignore index.

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy over non-ignored pixels, plus the logits gradient.
///
/// `labels` holds (N,H,W) class indices matching the logits' batch and
/// spatial dims. The loss is stabilized by per-pixel max subtraction; the
/// gradient at a counted pixel is (softmax - onehot) / count and zero at
/// ignored pixels.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    if labels.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            dimension: "label elements",
            expected: n * h * w,
            found: labels.len(),
        });
    }
    let plane = h * w;
    let data = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gdat = grad.data_mut();

    // first pass: count contributing pixels
    let mut count = 0usize;
    for t in labels {
        if *t != IGNORE_INDEX {
            if *t as usize >= k {
                return Err(Error::InvalidGeometry {
                    context: "cross_entropy",
                    message: format!("label {t} out of range for {k} classes"),
                });
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidGeometry {
            context: "cross_entropy",
            message: "all pixels ignored".into(),
        });
    }
    let inv_count = 1.0 / count as f64;

    let mut loss = 0.0;
    let mut probs = vec![0.0f64; k];
    for img in 0..n {
        for p in 0..plane {
            let t = labels[img * plane + p];
            if t == IGNORE_INDEX {
                continue;
            }
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(data[(img * k + c) * plane + p]);
            }
            let mut denom = 0.0;
            for c in 0..k {
                let e = (data[(img * k + c) * plane + p] - mx).exp();
                probs[c] = e;
                denom += e;
            }
            let t = t as usize;
            loss -= (probs[t] / denom).ln();
            for c in 0..k {
                let soft = probs[c] / denom;
                let onehot = if c == t { 1.0 } else { 0.0 };
                gdat[(img * k + c) * plane + p] = (soft - onehot) * inv_count;
            }
        }
    }
    Ok((loss * inv_count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_cost_ln_k() {
        for k in [2usize, 3, 7] {
            let logits = Tensor::full([1, k, 2, 2], 0.3);
            let labels = vec![0u8; 4];
            let (loss, _) = cross_entropy(&logits, &labels).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        let mut logits = Tensor::zeros([1, 3, 1, 1]);
        logits.set(0, 1, 0, 0, 50.0);
        let labels = vec![1u8];
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let logits = Tensor::random([1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let labels: Vec<u8> = (0..4).map(|_| rng.below(3) as u8).collect();
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let (lp, _) = cross_entropy(&plus, &labels).unwrap();
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let (lm, _) = cross_entropy(&minus, &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-7, "coord {i}: {numeric} vs {a}");
        }
    }

    #[test]
    fn gradient_sums_to_zero_over_classes() {
        let mut rng = Rng::new(22);
        let logits = Tensor::random([2, 4, 3, 3], -2.0, 2.0, &mut rng);
        let labels: Vec<u8> = (0..18).map(|_| rng.below(4) as u8).collect();
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let plane = 9;
        for img in 0..2 {
            for p in 0..plane {
                let s: f64 = (0..4).map(|c| grad.data()[(img * 4 + c) * plane + p]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ignored_pixels_get_zero_gradient() {
        let mut rng = Rng::new(23);
        let logits = Tensor::random([1, 2, 1, 2], -1.0, 1.0, &mut rng);
        let labels = vec![IGNORE_INDEX, 1];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        assert_eq!(grad.at(0, 0, 0, 0), 0.0);
        assert_eq!(grad.at(0, 1, 0, 0), 0.0);
        assert!(grad.at(0, 1, 0, 1) != 0.0);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::zeros([1, 2, 1, 1]);
        assert!(cross_entropy(&logits, &[IGNORE_INDEX]).is_err());
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = Tensor::zeros([1, 2, 1, 1]);
        assert!(cross_entropy(&logits, &[5]).is_err());
    }
}
