//! Pixel confusion matrix and mean intersection-over-union.

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};

/// K x K integer counts; rows index ground truth, columns prediction.
/// Ignore-index pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::ShapeMismatch {
                context: "confusion accumulate",
                dimension: "label dims",
                expected: truth.height * truth.width,
                found: pred.height * pred.width,
            });
        }
        for (p, t) in pred.data.iter().zip(&truth.data) {
            if *t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (*p as usize, *t as usize);
            if t >= self.num_classes || p >= self.num_classes {
                return Err(Error::InvalidGeometry {
                    context: "confusion accumulate",
                    message: format!(
                        "label pair (truth {t}, pred {p}) out of range for {} classes",
                        self.num_classes
                    ),
                });
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; accumulation order never changes totals.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch {
                context: "confusion merge",
                dimension: "class count",
                expected: self.num_classes,
                found: other.num_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU = TP / (TP + FP + FN); classes with zero union yield
    /// `None` and are excluded from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|t| *t != c).map(|t| self.count(t, c)).sum();
                let fn_: u64 = (0..k).filter(|p| *p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with nonzero union.
    pub fn miou(&self) -> f64 {
        let ious = self.per_class_iou();
        let present: Vec<f64> = ious.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn label_from(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = label_from(2, 2, vec![0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn constant_prediction_half_half() {
        // prediction all class 0, truth half 0 half 1
        let truth = label_from(1, 4, vec![0, 0, 1, 1]);
        let pred = label_from(1, 4, vec![0, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.miou(), 0.25);
    }

    #[test]
    fn matches_pixel_loop_oracle() {
        let mut rng = Rng::new(11);
        let k = 4;
        let truth_data: Vec<u8> = (0..256)
            .map(|_| {
                if rng.next_f64() < 0.1 {
                    IGNORE_INDEX
                } else {
                    rng.below(k) as u8
                }
            })
            .collect();
        let pred_data: Vec<u8> = (0..256).map(|_| rng.below(k) as u8).collect();
        let truth = label_from(16, 16, truth_data);
        let pred = label_from(16, 16, pred_data);
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &truth).unwrap();

        // brute-force per-pixel counting
        let mut counts = vec![vec![0u64; k]; k];
        for y in 0..16 {
            for x in 0..16 {
                let t = truth.get(y, x);
                if t == IGNORE_INDEX {
                    continue;
                }
                counts[t as usize][pred.get(y, x) as usize] += 1;
            }
        }
        for t in 0..k {
            for p in 0..k {
                assert_eq!(cm.count(t, p), counts[t][p]);
            }
        }
        // and the iou from those counts
        for c in 0..k {
            let tp = counts[c][c];
            let fp: u64 = (0..k).filter(|t| *t != c).map(|t| counts[t][c]).sum();
            let fn_: u64 = (0..k).filter(|p| *p != c).map(|p| counts[c][p]).sum();
            let want = tp as f64 / (tp + fp + fn_) as f64;
            assert_eq!(cm.per_class_iou()[c], Some(want));
        }
    }

    #[test]
    fn ignore_pixels_contribute_nothing() {
        let truth = label_from(1, 3, vec![IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX]);
        let pred = label_from(1, 3, vec![0, 1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn batched_accumulation_is_order_independent() {
        let mut rng = Rng::new(13);
        let make = |rng: &mut Rng| {
            label_from(4, 4, (0..16).map(|_| rng.below(3) as u8).collect())
        };
        let pairs: Vec<(LabelMap, LabelMap)> =
            (0..6).map(|_| (make(&mut rng), make(&mut rng))).collect();

        let mut whole = ConfusionMatrix::new(3);
        for (p, t) in &pairs {
            whole.accumulate(p, t).unwrap();
        }
        let mut merged = ConfusionMatrix::new(3);
        for chunk in pairs.chunks(2).rev() {
            let mut part = ConfusionMatrix::new(3);
            for (p, t) in chunk {
                part.accumulate(p, t).unwrap();
            }
            merged.merge(&part).unwrap();
        }
        assert_eq!(whole, merged);
    }

    #[test]
    fn miou_invariant_under_class_permutation() {
        let mut rng = Rng::new(17);
        let k = 4;
        let truth_data: Vec<u8> = (0..64).map(|_| rng.below(k) as u8).collect();
        let pred_data: Vec<u8> = (0..64).map(|_| rng.below(k) as u8).collect();
        let perm = [2u8, 0, 3, 1];
        let apply = |d: &[u8]| -> Vec<u8> { d.iter().map(|v| perm[*v as usize]).collect() };

        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(
            &label_from(8, 8, pred_data.clone()),
            &label_from(8, 8, truth_data.clone()),
        )
        .unwrap();
        let mut cm_perm = ConfusionMatrix::new(k);
        cm_perm
            .accumulate(
                &label_from(8, 8, apply(&pred_data)),
                &label_from(8, 8, apply(&truth_data)),
            )
            .unwrap();
        assert!((cm.miou() - cm_perm.miou()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = label_from(2, 2, vec![0; 4]);
        let b = label_from(2, 3, vec![0; 6]);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&a, &b).is_err());
    }

    #[test]
    fn zero_union_classes_excluded_from_mean() {
        // class 2 never appears in truth or prediction
        let truth = label_from(1, 4, vec![0, 0, 1, 1]);
        let pred = label_from(1, 4, vec![0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        assert_eq!(cm.miou(), 1.0);
    }
}
