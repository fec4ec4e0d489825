//! Segmentation metrics: confusion matrix, per-class IoU, mIoU.

use crate::model::{forward, ParamSet};
use crate::synthdata::LabeledImage;
use crate::tensor::argmax_with_conf;
use crate::{Error, Result};

/// C x C counts; `counts[gt][pred]` is the number of pixels with
/// ground truth `gt` predicted as `pred`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one batch of pixels.
    pub fn accumulate(&mut self, labels: &[usize], preds: &[usize]) -> Result<()> {
        if labels.len() != preds.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        for (&g, &p) in labels.iter().zip(preds) {
            if g >= self.classes || p >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "class {} out of range for {} classes",
                    g.max(p),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Merge a partial matrix built elsewhere (elementwise addition).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU (NaN for classes absent from both labels and
    /// predictions) and the mean over present classes.
    pub fn miou(&self) -> Result<(Vec<f64>, f64)> {
        let c = self.classes;
        let mut per_class = vec![f64::NAN; c];
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let diag = self.count(k, k);
            let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
            let denom = row + col - diag;
            if denom == 0 {
                continue;
            }
            let iou = diag as f64 / denom as f64;
            per_class[k] = iou;
            sum += iou;
            present += 1;
        }
        if present == 0 {
            return Err(Error::NoClassesPresent);
        }
        Ok((per_class, sum / present as f64))
    }
}

/// Argmax predictions of a model on one image.
pub fn predict(params: &ParamSet, image: &crate::tensor::NdArray) -> Result<Vec<usize>> {
    let logits = forward(params, image, None)?;
    Ok(argmax_with_conf(&logits).0)
}

/// Evaluate a model on labeled images: per-class IoU and mIoU.
pub fn evaluate_model(params: &ParamSet, images: &[LabeledImage]) -> Result<(Vec<f64>, f64)> {
    let mut cm = ConfusionMatrix::new(params.dims().classes);
    for img in images {
        let labels = img
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation image without labels".into()))?;
        let preds = predict(params, &img.pixels)?;
        cm.accumulate(labels, &preds)?;
    }
    cm.miou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn accumulate_empty_is_noop() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::NoClassesPresent)));
    }

    #[test]
    fn perfect_prediction_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(g, p), u64::from(g == p) * if g == 1 { 2 } else { 1 });
            }
        }
        let (per_class, mean) = cm.miou().unwrap();
        assert!(per_class.iter().all(|&x| x == 1.0));
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn half_half_constant_prediction() {
        // two classes half/half, predict everything class 0
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let (per_class, mean) = cm.miou().unwrap();
        assert_eq!(per_class[0], 0.5);
        assert_eq!(per_class[1], 0.0);
        assert_eq!(mean, 0.25);
    }

    #[test]
    fn absent_classes_excluded_from_mean() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 0], &[0, 1]).unwrap();
        let (per_class, mean) = cm.miou().unwrap();
        assert_eq!(per_class[0], 0.5);
        assert_eq!(per_class[1], 0.0);
        assert!(per_class[2].is_nan());
        assert!(per_class[3].is_nan());
        assert_eq!(mean, 0.25);
    }

    // Independent oracle: per-class IoU via pixel-index sets.
    fn set_oracle(labels: &[usize], preds: &[usize], classes: usize) -> (Vec<f64>, f64) {
        use std::collections::HashSet;
        let mut per = vec![f64::NAN; classes];
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..classes {
            let gt: HashSet<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            let pd: HashSet<usize> = preds
                .iter()
                .enumerate()
                .filter(|(_, &p)| p == c)
                .map(|(i, _)| i)
                .collect();
            let union = gt.union(&pd).count();
            if union == 0 {
                continue;
            }
            let inter = gt.intersection(&pd).count();
            let iou = inter as f64 / union as f64;
            per[c] = iou;
            sum += iou;
            n += 1;
        }
        (per, sum / n as f64)
    }

    #[test]
    fn miou_matches_set_oracle() {
        for seed in 0..200u64 {
            let mut rng = derive_rng(seed, &[11]);
            let classes = rng.random_range(2..6);
            let n = rng.random_range(1..60);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&labels, &preds).unwrap();
            let (got_per, got_mean) = cm.miou().unwrap();
            let (want_per, want_mean) = set_oracle(&labels, &preds, classes);
            assert_eq!(got_mean, want_mean, "seed {seed}");
            for c in 0..classes {
                if want_per[c].is_nan() {
                    assert!(got_per[c].is_nan());
                } else {
                    assert_eq!(got_per[c], want_per[c]);
                }
            }
        }
    }

    #[test]
    fn class_permutation_equivariance() {
        let labels = vec![0, 1, 2, 0, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 0, 2, 2, 2, 0];
        let perm = [2usize, 0, 1];
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&labels, &preds).unwrap();
        let mut b = ConfusionMatrix::new(3);
        let plabels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let ppreds: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        b.accumulate(&plabels, &ppreds).unwrap();
        let (pa, ma) = a.miou().unwrap();
        let (pb, mb) = b.miou().unwrap();
        assert_eq!(ma, mb);
        for c in 0..3 {
            assert_eq!(pa[c], pb[perm[c]]);
        }
    }

    #[test]
    fn accumulate_order_independent_and_mergeable() {
        let labels = vec![0, 1, 0, 1, 1, 0];
        let preds = vec![1, 1, 0, 0, 1, 0];
        let mut whole = ConfusionMatrix::new(2);
        whole.accumulate(&labels, &preds).unwrap();

        let mut part1 = ConfusionMatrix::new(2);
        part1.accumulate(&labels[..3], &preds[..3]).unwrap();
        let mut part2 = ConfusionMatrix::new(2);
        part2.accumulate(&labels[3..], &preds[3..]).unwrap();
        part2.merge(&part1);
        assert_eq!(whole, part2);
    }
}
