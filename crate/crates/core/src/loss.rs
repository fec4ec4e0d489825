//! Training objectives: supervised cross-entropy with optional online
//! hard example mining, confidence-masked pseudo-labels, dual
//! weak-to-strong consistency, teacher self-training, frozen-prior
//! distillation, and the combined centralized/unsupervised objectives.
//!
//! Every loss is a sum of per-pixel `coeff * (-ln p[pixel, class])`
//! contributions. The scalar ops below return the value; the `*_terms`
//! variants also return the per-pixel terms so [`crate::model::GradTape`]
//! can fold them into logit gradients analytically.

use crate::tensor::{argmax_with_conf, NdArray};
use crate::{Error, Result};

/// Probabilities below this are clamped inside logs; the paper of
/// record for p = 0 is nobody, so the clamp keeps losses finite and
/// zeroes the gradient in the clamped region.
pub const PROB_CLAMP: f64 = 1e-12;

/// Per-pixel hard labels with confidence and threshold mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub conf: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of pixels kept by the confidence mask.
    pub fn masked_in_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Argmax labels, max-probability confidence, and the `conf >= tau`
/// mask from per-pixel class posteriors. Ties break to the lowest
/// class index.
pub fn make_pseudo_labels(weak_probs: &NdArray, tau: f64) -> PseudoLabels {
    let (labels, conf) = argmax_with_conf(weak_probs);
    let mask = conf.iter().map(|&c| c >= tau).collect();
    PseudoLabels {
        labels,
        conf,
        mask,
        threshold: tau,
    }
}

/// One pixel's contribution to a cross-entropy reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTerm {
    pub pixel: usize,
    pub class: usize,
    pub coeff: f64,
    /// True when the probability sat below [`PROB_CLAMP`]; the value
    /// used the clamp and the gradient is zero there.
    pub clamped: bool,
}

/// A scalar loss plus the per-pixel terms that produced it.
#[derive(Debug, Clone, Default)]
pub struct CeTerms {
    pub value: f64,
    pub terms: Vec<PixelTerm>,
    /// Number of clamped pixels, for logging.
    pub clamped: usize,
}

impl CeTerms {
    pub fn zero() -> Self {
        Self::default()
    }
}

fn nll(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (-(PROB_CLAMP.ln()), true)
    } else {
        (-p.ln(), false)
    }
}

/// Supervised cross-entropy with optional online hard example mining:
/// with `ohem_keep < 1`, only the ceil(keep * N) hardest pixels are
/// averaged.
pub fn supervised_ce_terms(
    probs: &NdArray,
    labels: &[usize],
    ohem_keep: f64,
) -> Result<CeTerms> {
    let n = probs.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    if !(ohem_keep > 0.0 && ohem_keep <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ohem_keep {ohem_keep} outside (0, 1]"
        )));
    }
    let classes = probs.cols();
    let mut per_pixel = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let (l, clamped) = nll(probs.at2(i, y));
        per_pixel.push((i, y, l, clamped));
    }
    let keep = if ohem_keep < 1.0 {
        ((ohem_keep * n as f64).ceil() as usize).clamp(1, n)
    } else {
        n
    };
    if keep < n {
        // hardest first; ties resolve to the lower pixel index
        per_pixel.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        per_pixel.truncate(keep);
    }
    let coeff = 1.0 / keep as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let terms = per_pixel
        .into_iter()
        .map(|(pixel, class, l, cl)| {
            value += coeff * l;
            clamped += cl as usize;
            PixelTerm {
                pixel,
                class,
                coeff,
                clamped: cl,
            }
        })
        .collect();
    Ok(CeTerms {
        value,
        terms,
        clamped,
    })
}

pub fn supervised_ce(probs: &NdArray, labels: &[usize], ohem_keep: f64) -> Result<f64> {
    supervised_ce_terms(probs, labels, ohem_keep).map(|t| t.value)
}

/// Confidence-masked cross-entropy against pseudo-labels, normalized
/// by the total pixel count (masked-out pixels contribute zero but
/// still count in the denominator).
pub fn consistency_terms(strong_probs: &NdArray, pl: &PseudoLabels) -> Result<CeTerms> {
    let n = strong_probs.rows();
    if pl.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} pseudo-labels for {} pixels",
            pl.len(),
            n
        )));
    }
    let coeff = 1.0 / n as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let mut terms = Vec::new();
    for i in 0..n {
        if !pl.mask[i] {
            continue;
        }
        let (l, cl) = nll(strong_probs.at2(i, pl.labels[i]));
        value += coeff * l;
        clamped += cl as usize;
        terms.push(PixelTerm {
            pixel: i,
            class: pl.labels[i],
            coeff,
            clamped: cl,
        });
    }
    Ok(CeTerms {
        value,
        terms,
        clamped,
    })
}

pub fn consistency_loss(strong_probs: &NdArray, pl: &PseudoLabels) -> Result<f64> {
    consistency_terms(strong_probs, pl).map(|t| t.value)
}

/// Both strong streams against the same weak-view pseudo-labels.
pub fn dual_consistency(
    strong1_probs: &NdArray,
    strong2_probs: &NdArray,
    pl: &PseudoLabels,
) -> Result<(f64, f64)> {
    Ok((
        consistency_loss(strong1_probs, pl)?,
        consistency_loss(strong2_probs, pl)?,
    ))
}

/// Self-training term: pseudo-labels from a teacher's weak view
/// supervise the student's strong view.
pub fn teacher_loss(
    student_strong_probs: &NdArray,
    teacher_weak_probs: &NdArray,
    tau_t: f64,
) -> Result<f64> {
    let pl = make_pseudo_labels(teacher_weak_probs, tau_t);
    consistency_loss(student_strong_probs, &pl)
}

/// Distillation from a frozen prior predictor; same functional form as
/// [`teacher_loss`] with the prior as label source.
pub fn prior_distill_loss(
    strong_probs: &NdArray,
    prior_weak_probs: &NdArray,
    tau_p: f64,
) -> Result<f64> {
    let pl = make_pseudo_labels(prior_weak_probs, tau_p);
    consistency_loss(strong_probs, &pl)
}

/// Splice two pseudo-label maps with the provenance mask produced by
/// cutmix (`true` = pixel came from `b`), so labels, confidence and
/// masks travel with their pixels.
pub fn mix_pseudo_labels(a: &PseudoLabels, b: &PseudoLabels, from_b: &[bool]) -> PseudoLabels {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), from_b.len());
    let pick = |i: usize| if from_b[i] { b } else { a };
    PseudoLabels {
        labels: (0..a.len()).map(|i| pick(i).labels[i]).collect(),
        conf: (0..a.len()).map(|i| pick(i).conf[i]).collect(),
        mask: (0..a.len()).map(|i| pick(i).mask[i]).collect(),
        threshold: a.threshold,
    }
}

/// Unweighted loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_sup: f64,
    pub l_cons_s1: f64,
    pub l_cons_s2: f64,
    pub l_teacher: f64,
    pub l_mclip_s1: f64,
    pub l_mclip_s2: f64,
    pub masked_pixel_fraction: f64,
}

/// Components plus the weighted total of one objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_cons_s1: f64,
    pub l_cons_s2: f64,
    pub l_teacher: f64,
    pub l_mclip_s1: f64,
    pub l_mclip_s2: f64,
    pub total: f64,
    pub masked_pixel_fraction: f64,
}

impl LossBreakdown {
    fn from_parts(parts: &LossParts, total: f64) -> Self {
        Self {
            l_sup: parts.l_sup,
            l_cons_s1: parts.l_cons_s1,
            l_cons_s2: parts.l_cons_s2,
            l_teacher: parts.l_teacher,
            l_mclip_s1: parts.l_mclip_s1,
            l_mclip_s2: parts.l_mclip_s2,
            total,
            masked_pixel_fraction: parts.masked_pixel_fraction,
        }
    }
}

/// total = l_sup + lambda_cons (cons_s1 + cons_s2)
///              + lambda_mclip (mclip_s1 + mclip_s2)
pub fn centralized_objective(
    parts: &LossParts,
    lambda_cons: f64,
    lambda_mclip: f64,
) -> LossBreakdown {
    let total = parts.l_sup
        + lambda_cons * (parts.l_cons_s1 + parts.l_cons_s2)
        + lambda_mclip * (parts.l_mclip_s1 + parts.l_mclip_s2);
    LossBreakdown::from_parts(parts, total)
}

/// total = lambda_t * l_teacher + lambda_cons (cons_s1 + cons_s2)
///                              + lambda_mclip (mclip_s1 + mclip_s2)
///
/// The supervised term is absent; the prior term rides along with
/// weight zero when distillation is off.
pub fn unsupervised_objective(
    parts: &LossParts,
    lambda_t: f64,
    lambda_cons: f64,
    lambda_mclip: f64,
) -> LossBreakdown {
    let total = lambda_t * parts.l_teacher
        + lambda_cons * (parts.l_cons_s1 + parts.l_cons_s2)
        + lambda_mclip * (parts.l_mclip_s1 + parts.l_mclip_s2);
    LossBreakdown::from_parts(parts, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn arr2(rows: usize, cols: usize, v: Vec<f64>) -> NdArray {
        NdArray::new(vec![rows, cols], v).unwrap()
    }

    fn random_probs(rows: usize, cols: usize, seed: u64) -> NdArray {
        let mut rng = derive_rng(seed, &[7]);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.into_iter().map(|x| x / s));
        }
        arr2(rows, cols, data)
    }

    #[test]
    fn supervised_ce_single_pixel() {
        let probs = arr2(1, 2, vec![0.25, 0.75]);
        let l = supervised_ce(&probs, &[1], 1.0).unwrap();
        assert!((l - 0.75f64.ln().abs()).abs() < 1e-6);
        assert!((l - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn supervised_ce_ohem_top_quarter() {
        // per-pixel losses 1, 2, 3, 4 via p = e^-loss at the label
        let losses = [1.0, 2.0, 3.0, 4.0];
        let mut data = Vec::new();
        for l in losses {
            let p = (-l as f64).exp();
            data.extend([p, 1.0 - p]);
        }
        let probs = arr2(4, 2, data);
        let l = supervised_ce(&probs, &[0, 0, 0, 0], 0.25).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
        let full = supervised_ce(&probs, &[0, 0, 0, 0], 1.0).unwrap();
        assert!((full - 2.5).abs() < 1e-12);
    }

    #[test]
    fn supervised_ce_perfect_predictions() {
        let probs = arr2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = supervised_ce(&probs, &[0, 1], 1.0).unwrap();
        assert!(l <= 1e-9);
    }

    #[test]
    fn supervised_ce_clamps_zero_probability() {
        let probs = arr2(1, 2, vec![0.0, 1.0]);
        let t = supervised_ce_terms(&probs, &[0], 1.0).unwrap();
        assert!((t.value - (-(PROB_CLAMP.ln()))).abs() < 1e-6);
        assert_eq!(t.clamped, 1);
        assert!(t.terms[0].clamped);
    }

    #[test]
    fn pseudo_labels_threshold_and_ties() {
        let probs = arr2(2, 2, vec![0.95, 0.05, 0.6, 0.4]);
        let pl = make_pseudo_labels(&probs, 0.9);
        assert_eq!(pl.labels, vec![0, 0]);
        assert_eq!(pl.mask, vec![true, false]);

        let all = make_pseudo_labels(&probs, 0.0);
        assert_eq!(all.mask, vec![true, true]);

        // boundary conf == tau is kept; ties go to the lowest index
        let tie = make_pseudo_labels(&arr2(1, 2, vec![0.5, 0.5]), 0.5);
        assert_eq!(tie.labels, vec![0]);
        assert_eq!(tie.mask, vec![true]);
    }

    #[test]
    fn consistency_single_masked_pixel() {
        let pl = PseudoLabels {
            labels: vec![0],
            conf: vec![1.0],
            mask: vec![true],
            threshold: 0.9,
        };
        let l = consistency_loss(&arr2(1, 2, vec![0.5, 0.5]), &pl).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_all_masked_out_is_zero() {
        let pl = PseudoLabels {
            labels: vec![0, 1],
            conf: vec![0.5, 0.5],
            mask: vec![false, false],
            threshold: 0.9,
        };
        let l = consistency_loss(&random_probs(2, 2, 1), &pl).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn consistency_matches_scalar_loop() {
        for seed in 0..10u64 {
            let n = 12;
            let weak = random_probs(n, 4, seed);
            let strong = random_probs(n, 4, seed + 50);
            let pl = make_pseudo_labels(&weak, 0.3);
            let got = consistency_loss(&strong, &pl).unwrap();
            // independent scalar loop
            let mut want = 0.0;
            for i in 0..n {
                if pl.conf[i] >= 0.3 {
                    want += -(strong.at2(i, pl.labels[i]).max(PROB_CLAMP)).ln();
                }
            }
            want /= n as f64;
            assert!((got - want).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn dual_consistency_symmetry_and_sum() {
        let weak = random_probs(6, 3, 3);
        let s1 = random_probs(6, 3, 4);
        let s2 = random_probs(6, 3, 5);
        let pl = make_pseudo_labels(&weak, 0.2);
        let (a, b) = dual_consistency(&s1, &s2, &pl).unwrap();
        assert_eq!(a, consistency_loss(&s1, &pl).unwrap());
        assert_eq!(b, consistency_loss(&s2, &pl).unwrap());
        let (c, d) = dual_consistency(&s1, &s1, &pl).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn teacher_loss_self_training_bounds() {
        // teacher == student on the same view: loss is the mean
        // negative log of the row max, which nonnegative and never
        // exceeds the mean row entropy.
        let p = random_probs(20, 4, 9);
        let l = teacher_loss(&p, &p, 0.0).unwrap();
        let mut entropy = 0.0;
        for i in 0..20 {
            entropy += -p.row(i).iter().map(|&x| x * x.ln()).sum::<f64>();
        }
        entropy /= 20.0;
        assert!(l >= 0.0);
        assert!(l <= entropy + 1e-12);
    }

    #[test]
    fn teacher_confident_student_uniform() {
        let classes = 4;
        let teacher = arr2(2, classes, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let uniform = arr2(2, classes, vec![0.25; 8]);
        let l = teacher_loss(&uniform, &teacher, 0.9).unwrap();
        assert!((l - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_loss_matches_scalar_loop() {
        for seed in 20..25u64 {
            let weak = random_probs(9, 3, seed);
            let strong = random_probs(9, 3, seed + 1);
            let got = teacher_loss(&strong, &weak, 0.4).unwrap();
            let mut want = 0.0;
            for i in 0..9 {
                let row = weak.row(i);
                let mut y = 0;
                for c in 1..3 {
                    if row[c] > row[y] {
                        y = c;
                    }
                }
                if row[y] >= 0.4 {
                    want += -(strong.at2(i, y).max(PROB_CLAMP)).ln();
                }
            }
            want /= 9.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_distill_masked_out_and_uniform() {
        let prior = arr2(2, 2, vec![0.6, 0.4, 0.55, 0.45]);
        let student = random_probs(2, 2, 33);
        // every prior confidence below tau: nothing to distill
        assert_eq!(prior_distill_loss(&student, &prior, 0.95).unwrap(), 0.0);

        let onehot = arr2(1, 3, vec![0.0, 1.0, 0.0]);
        let uni = arr2(1, 3, vec![1.0 / 3.0; 3]);
        let l = prior_distill_loss(&uni, &onehot, 0.0).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mix_pseudo_labels_follows_provenance() {
        let a = PseudoLabels {
            labels: vec![0, 0, 0],
            conf: vec![0.9, 0.8, 0.7],
            mask: vec![true, true, false],
            threshold: 0.5,
        };
        let b = PseudoLabels {
            labels: vec![1, 1, 1],
            conf: vec![0.6, 0.5, 0.95],
            mask: vec![false, false, true],
            threshold: 0.5,
        };
        let m = mix_pseudo_labels(&a, &b, &[false, true, true]);
        assert_eq!(m.labels, vec![0, 1, 1]);
        assert_eq!(m.conf, vec![0.9, 0.5, 0.95]);
        assert_eq!(m.mask, vec![true, false, true]);
    }

    #[test]
    fn centralized_objective_assembly() {
        let parts = LossParts {
            l_sup: 2.0,
            l_cons_s1: 0.5,
            l_cons_s2: 0.25,
            l_mclip_s1: 0.1,
            l_mclip_s2: 0.3,
            ..Default::default()
        };
        let b = centralized_objective(&parts, 0.0, 0.0);
        assert_eq!(b.total, 2.0);

        let ones = LossParts {
            l_sup: 1.0,
            l_cons_s1: 1.0,
            l_cons_s2: 1.0,
            l_mclip_s1: 1.0,
            l_mclip_s2: 1.0,
            ..Default::default()
        };
        let b = centralized_objective(&ones, 1.0, 1.0);
        assert_eq!(b.total, 5.0);

        // recomputation from components matches
        let b = centralized_objective(&parts, 0.7, 0.05);
        let re = b.l_sup + 0.7 * (b.l_cons_s1 + b.l_cons_s2) + 0.05 * (b.l_mclip_s1 + b.l_mclip_s2);
        assert!((b.total - re).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_objective_assembly() {
        let parts = LossParts {
            l_teacher: 3.0,
            l_cons_s1: 1.0,
            l_cons_s2: 2.0,
            l_mclip_s1: 0.5,
            l_mclip_s2: 0.5,
            ..Default::default()
        };
        assert_eq!(unsupervised_objective(&parts, 1.0, 0.0, 0.0).total, 3.0);
        assert_eq!(unsupervised_objective(&parts, 0.0, 0.0, 0.0).total, 0.0);
        let b = unsupervised_objective(&parts, 0.3, 0.6, 0.1);
        let re = 0.3 * b.l_teacher + 0.6 * (b.l_cons_s1 + b.l_cons_s2)
            + 0.1 * (b.l_mclip_s1 + b.l_mclip_s2);
        assert!((b.total - re).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mask_count_monotone_in_tau(rows in 1usize..20, cols in 2usize..5, seed in any::<u64>()) {
            let probs = random_probs(rows, cols, seed);
            let mut prev = usize::MAX;
            for step in 0..=10 {
                let tau = step as f64 / 10.0;
                let pl = make_pseudo_labels(&probs, tau);
                let count = pl.mask.iter().filter(|&&m| m).count();
                prop_assert!(count <= prev, "tau {tau}: {count} > {prev}");
                prev = count;
            }
        }

        #[test]
        fn consistency_nonnegative_zero_iff_perfect(rows in 1usize..10, seed in any::<u64>()) {
            let weak = random_probs(rows, 3, seed);
            let pl = make_pseudo_labels(&weak, 0.2);
            let strong = random_probs(rows, 3, seed.wrapping_add(1));
            let l = consistency_loss(&strong, &pl).unwrap();
            prop_assert!(l >= 0.0);

            // perfect predictions on masked-in pixels give zero
            let mut data = vec![0.0; rows * 3];
            for i in 0..rows {
                data[i * 3 + pl.labels[i]] = 1.0;
            }
            let perfect = arr2(rows, 3, data);
            let lz = consistency_loss(&perfect, &pl).unwrap();
            prop_assert!(lz.abs() < 1e-12);
        }
    }
}
