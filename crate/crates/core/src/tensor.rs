//! Minimal dense numeric kernel: shaped row-major arrays of f64 plus
//! the handful of primitives everything else builds on.
//!
//! No broadcasting, no views, no BLAS. Every public operation keeps the
//! finiteness contract: NaN or infinity in a result is a bug, not data.

use crate::{Error, Result};

/// Dense row-major array of f64 with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    /// Build an array, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {shape:?}")));
        }
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("NdArray::new".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D array.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D array.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// One row of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Check every entry is finite; used after in-place arithmetic.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }
}

/// Numerically stable row-wise softmax over a R x C array.
///
/// Each output row is nonnegative and sums to 1; the max of the row is
/// subtracted before exponentiation so large logits do not overflow.
pub fn softmax_rows(logits: &NdArray) -> Result<NdArray> {
    if logits.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax_rows wants R x C, got {:?}",
            logits.shape()
        )));
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = NdArray::zeros(vec![r, c]);
    for i in 0..r {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            let e = (x - m).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out.check_finite("softmax_rows")?;
    Ok(out)
}

/// Guard against division by a vanishing norm.
pub const NORM_EPS: f64 = 1e-12;

/// v / max(|v|_2, eps). The zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(NORM_EPS);
    v.iter().map(|x| x / denom).collect()
}

/// Per-row argmax and the attained maximum, for rows that are
/// probability distributions. Ties break to the lowest index.
pub fn argmax_with_conf(probs: &NdArray) -> (Vec<usize>, Vec<f64>) {
    let (r, c) = (probs.rows(), probs.cols());
    let mut labels = Vec::with_capacity(r);
    let mut conf = Vec::with_capacity(r);
    for i in 0..r {
        let row = probs.row(i);
        let mut best = 0usize;
        let mut best_p = row[0];
        for j in 1..c {
            if row[j] > best_p {
                best = j;
                best_p = row[j];
            }
        }
        labels.push(best);
        conf.push(best_p);
    }
    (labels, conf)
}

/// Pairwise (cascade) summation: deterministic for a fixed operand
/// order and far less rounding drift than a running sum.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arr2(rows: usize, cols: usize, v: Vec<f64>) -> NdArray {
        NdArray::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn softmax_symmetric_row() {
        let p = softmax_rows(&arr2(1, 2, vec![0.0, 0.0])).unwrap();
        assert!((p.at2(0, 0) - 0.5).abs() < 1e-15);
        assert!((p.at2(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_rows(&arr2(1, 2, vec![2.0_f64.ln(), 0.0])).unwrap();
        assert!((p.at2(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.at2(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_stable_under_large_logits() {
        let p = softmax_rows(&arr2(1, 2, vec![1000.0, 1000.0])).unwrap();
        assert!((p.at2(0, 0) - 0.5).abs() < 1e-15);
        assert!((p.at2(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_errors() {
        let e = softmax_rows(&NdArray {
            shape: vec![],
            data: vec![],
        });
        assert!(matches!(e, Err(Error::EmptyTensor)));
    }

    #[test]
    fn l2_normalize_closed_form() {
        let v = l2_normalize(&[3.0, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector() {
        let v = l2_normalize(&[0.0, 0.0]);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_unit_vector_fixed_point() {
        let u = [1.0 / 2.0_f64.sqrt(), 1.0 / 2.0_f64.sqrt()];
        let v = l2_normalize(&u);
        assert!((v[0] - u[0]).abs() < 1e-12);
        assert!((v[1] - u[1]).abs() < 1e-12);
    }

    #[test]
    fn argmax_basic_and_tie_break() {
        let (l, c) = argmax_with_conf(&arr2(1, 2, vec![0.95, 0.05]));
        assert_eq!(l, vec![0]);
        assert!((c[0] - 0.95).abs() < 1e-15);
        let (l, c) = argmax_with_conf(&arr2(1, 2, vec![0.5, 0.5]));
        assert_eq!(l, vec![0]);
        assert!((c[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_matches_naive_scan() {
        // Frozen 5x4 instance; expectation computed by the scan below.
        let data = vec![
            0.1, 0.4, 0.3, 0.2, //
            0.25, 0.25, 0.25, 0.25, //
            0.0, 0.0, 0.9, 0.1, //
            0.3, 0.3, 0.1, 0.3, //
            0.05, 0.15, 0.35, 0.45,
        ];
        let probs = arr2(5, 4, data.clone());
        let (labels, conf) = argmax_with_conf(&probs);
        for i in 0..5 {
            let row = &data[i * 4..(i + 1) * 4];
            let mut want = 0;
            for j in 1..4 {
                if row[j] > row[want] {
                    want = j;
                }
            }
            assert_eq!(labels[i], want);
            assert_eq!(conf[i], row[want]);
        }
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(NdArray::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(NdArray::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn new_rejects_bad_shape() {
        assert!(NdArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_smalls() {
        let v: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 45.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(seed, &[99]);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax_rows(&arr2(rows, cols, data)).unwrap();
            for i in 0..rows {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(cols in 1usize..6, shift in -30.0f64..30.0, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(seed, &[98]);
            let data: Vec<f64> = (0..cols).map(|_| rng.random_range(-50.0..50.0)).collect();
            let shifted: Vec<f64> = data.iter().map(|x| x + shift).collect();
            let a = softmax_rows(&arr2(1, cols, data)).unwrap();
            let b = softmax_rows(&arr2(1, cols, shifted)).unwrap();
            for j in 0..cols {
                prop_assert!((a.at2(0, j) - b.at2(0, j)).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_idempotent(n in 1usize..8, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(seed, &[97]);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let once = l2_normalize(&v);
            let twice = l2_normalize(&once);
            for j in 0..n {
                prop_assert!((once[j] - twice[j]).abs() < 1e-12);
            }
        }
    }
}
