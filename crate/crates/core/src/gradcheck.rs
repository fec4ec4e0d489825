//! Certification of the analytic gradients against central finite
//! differences, term by term: supervised CE (with and without hard
//! example mining), each consistency stream, the teacher term, the
//! prior distillation streams, and the two combined objectives.
//!
//! The oracle is plain central differencing of the scalar loss in every
//! trainable parameter; it never touches the backward pass it checks.

use crate::augment::{make_views, AugmentConfig, ViewBundle};
use crate::loss::{consistency_terms, make_pseudo_labels, supervised_ce_terms, PseudoLabels};
use crate::model::{forward_probs, init_params, GradTape, ModelDims, ParamGrads, ParamSet};
use crate::rng::derive_rng;
use crate::tensor::NdArray;
use crate::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Entries where analytic and numeric gradients are both below this
/// are treated as zero and skipped.
pub const SKIP_BELOW: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Sup,
    ConsS1,
    ConsS2,
    Teacher,
    MclipS1,
    MclipS2,
    Centralized,
    Unsupervised,
}

pub const ALL_TERMS: [LossTerm; 8] = [
    LossTerm::Sup,
    LossTerm::ConsS1,
    LossTerm::ConsS2,
    LossTerm::Teacher,
    LossTerm::MclipS1,
    LossTerm::MclipS2,
    LossTerm::Centralized,
    LossTerm::Unsupervised,
];

impl LossTerm {
    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Sup => "l_sup",
            LossTerm::ConsS1 => "l_cons_s1",
            LossTerm::ConsS2 => "l_cons_s2",
            LossTerm::Teacher => "l_teacher",
            LossTerm::MclipS1 => "l_mclip_s1",
            LossTerm::MclipS2 => "l_mclip_s2",
            LossTerm::Centralized => "l_cent",
            LossTerm::Unsupervised => "l_unsup",
        }
    }
}

/// One random configuration: a student, an independent teacher and
/// prior, one view bundle, ground-truth labels, and the thresholds and
/// weights of the objectives.
pub struct ProbeContext {
    pub params: ParamSet,
    pub teacher: ParamSet,
    pub prior: ParamSet,
    pub views: ViewBundle,
    pub labels: Vec<usize>,
    pub tau: f64,
    pub tau_t: f64,
    pub tau_p: f64,
    pub ohem_keep: f64,
    pub lambda_cons: f64,
    pub lambda_t: f64,
    pub lambda_mclip: f64,
}

/// Draw a random configuration. Dimensions stay small so a full trial
/// set runs in well under a minute.
pub fn random_context(seed: u64) -> Result<ProbeContext> {
    let mut rng = derive_rng(seed, &[0x6c_u64]);
    let dims = ModelDims {
        input_channels: rng.random_range(2..5),
        hidden: rng.random_range(3..7),
        feature: rng.random_range(3..6),
        classes: rng.random_range(2..5),
    };
    let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
    let data: Vec<f64> = (0..h * w * dims.input_channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let image = NdArray::new(vec![h, w, dims.input_channels], data)?;
    let views = make_views(&image, &AugmentConfig::default(), dims.hidden, &mut rng)?;
    let labels = (0..h * w)
        .map(|_| rng.random_range(0..dims.classes))
        .collect();
    Ok(ProbeContext {
        params: init_params(seed.wrapping_add(1), &dims),
        teacher: init_params(seed.wrapping_add(2), &dims),
        prior: init_params(seed.wrapping_add(3), &dims),
        views,
        labels,
        tau: rng.random_range(0.2..0.8),
        tau_t: rng.random_range(0.2..0.8),
        tau_p: rng.random_range(0.2..0.8),
        ohem_keep: [1.0, 0.7, 0.4][rng.random_range(0..3)],
        lambda_cons: rng.random_range(0.2..1.5),
        lambda_t: rng.random_range(0.2..1.5),
        lambda_mclip: rng.random_range(0.05..0.5),
    })
}

impl ProbeContext {
    fn teacher_pl(&self) -> Result<PseudoLabels> {
        Ok(make_pseudo_labels(
            &forward_probs(&self.teacher, &self.views.weak, None)?,
            self.tau_t,
        ))
    }

    fn prior_pl(&self) -> Result<PseudoLabels> {
        Ok(make_pseudo_labels(
            &forward_probs(&self.prior, &self.views.weak, None)?,
            self.tau_p,
        ))
    }

    /// The loss value as a pure function of candidate parameters; this
    /// is what the finite-difference oracle probes.
    pub fn eval(&self, params: &ParamSet, term: LossTerm) -> Result<f64> {
        let weak = forward_probs(params, &self.views.weak, None)?;
        let s1 = forward_probs(params, &self.views.strong1, Some(&self.views.dropout1))?;
        let s2 = forward_probs(params, &self.views.strong2, Some(&self.views.dropout2))?;
        let student_pl = make_pseudo_labels(&weak, self.tau);
        let value = match term {
            LossTerm::Sup => supervised_ce_terms(&weak, &self.labels, self.ohem_keep)?.value,
            LossTerm::ConsS1 => consistency_terms(&s1, &student_pl)?.value,
            LossTerm::ConsS2 => consistency_terms(&s2, &student_pl)?.value,
            LossTerm::Teacher => consistency_terms(&s1, &self.teacher_pl()?)?.value,
            LossTerm::MclipS1 => consistency_terms(&s1, &self.prior_pl()?)?.value,
            LossTerm::MclipS2 => consistency_terms(&s2, &self.prior_pl()?)?.value,
            LossTerm::Centralized => {
                let prior_pl = self.prior_pl()?;
                supervised_ce_terms(&weak, &self.labels, self.ohem_keep)?.value
                    + self.lambda_cons
                        * (consistency_terms(&s1, &student_pl)?.value
                            + consistency_terms(&s2, &student_pl)?.value)
                    + self.lambda_mclip
                        * (consistency_terms(&s1, &prior_pl)?.value
                            + consistency_terms(&s2, &prior_pl)?.value)
            }
            LossTerm::Unsupervised => {
                let prior_pl = self.prior_pl()?;
                self.lambda_t * consistency_terms(&s1, &self.teacher_pl()?)?.value
                    + self.lambda_cons
                        * (consistency_terms(&s1, &student_pl)?.value
                            + consistency_terms(&s2, &student_pl)?.value)
                    + self.lambda_mclip
                        * (consistency_terms(&s1, &prior_pl)?.value
                            + consistency_terms(&s2, &prior_pl)?.value)
            }
        };
        Ok(value)
    }

    /// The analytic gradient of the same term through the tape.
    pub fn grad(&self, term: LossTerm) -> Result<(f64, ParamGrads)> {
        let mut tape = GradTape::new(&self.params);
        let weak = tape.forward(&self.views.weak, None)?;
        let s1 = tape.forward(&self.views.strong1, Some(&self.views.dropout1))?;
        let s2 = tape.forward(&self.views.strong2, Some(&self.views.dropout2))?;
        let student_pl = make_pseudo_labels(tape.probs(weak), self.tau);

        match term {
            LossTerm::Sup => {
                let t = supervised_ce_terms(tape.probs(weak), &self.labels, self.ohem_keep)?;
                tape.add_terms(weak, &t, 1.0);
            }
            LossTerm::ConsS1 => {
                let t = consistency_terms(tape.probs(s1), &student_pl)?;
                tape.add_terms(s1, &t, 1.0);
            }
            LossTerm::ConsS2 => {
                let t = consistency_terms(tape.probs(s2), &student_pl)?;
                tape.add_terms(s2, &t, 1.0);
            }
            LossTerm::Teacher => {
                let t = consistency_terms(tape.probs(s1), &self.teacher_pl()?)?;
                tape.add_terms(s1, &t, 1.0);
            }
            LossTerm::MclipS1 => {
                let t = consistency_terms(tape.probs(s1), &self.prior_pl()?)?;
                tape.add_terms(s1, &t, 1.0);
            }
            LossTerm::MclipS2 => {
                let t = consistency_terms(tape.probs(s2), &self.prior_pl()?)?;
                tape.add_terms(s2, &t, 1.0);
            }
            LossTerm::Centralized => {
                let sup = supervised_ce_terms(tape.probs(weak), &self.labels, self.ohem_keep)?;
                tape.add_terms(weak, &sup, 1.0);
                let c1 = consistency_terms(tape.probs(s1), &student_pl)?;
                tape.add_terms(s1, &c1, self.lambda_cons);
                let c2 = consistency_terms(tape.probs(s2), &student_pl)?;
                tape.add_terms(s2, &c2, self.lambda_cons);
                let prior_pl = self.prior_pl()?;
                let m1 = consistency_terms(tape.probs(s1), &prior_pl)?;
                tape.add_terms(s1, &m1, self.lambda_mclip);
                let m2 = consistency_terms(tape.probs(s2), &prior_pl)?;
                tape.add_terms(s2, &m2, self.lambda_mclip);
            }
            LossTerm::Unsupervised => {
                let t = consistency_terms(tape.probs(s1), &self.teacher_pl()?)?;
                tape.add_terms(s1, &t, self.lambda_t);
                let c1 = consistency_terms(tape.probs(s1), &student_pl)?;
                tape.add_terms(s1, &c1, self.lambda_cons);
                let c2 = consistency_terms(tape.probs(s2), &student_pl)?;
                tape.add_terms(s2, &c2, self.lambda_cons);
                let prior_pl = self.prior_pl()?;
                let m1 = consistency_terms(tape.probs(s1), &prior_pl)?;
                tape.add_terms(s1, &m1, self.lambda_mclip);
                let m2 = consistency_terms(tape.probs(s2), &prior_pl)?;
                tape.add_terms(s2, &m2, self.lambda_mclip);
            }
        }
        tape.finish()
    }
}

fn trainable_entry_mut(p: &mut ParamSet, array: usize, idx: usize) -> &mut f64 {
    match array {
        0 => &mut p.w1.data_mut()[idx],
        1 => &mut p.b1.data_mut()[idx],
        2 => &mut p.w2.data_mut()[idx],
        3 => &mut p.b2.data_mut()[idx],
        _ => unreachable!(),
    }
}

/// Central finite differences of `f` in every trainable parameter.
pub fn finite_difference_grad<F>(params: &ParamSet, f: F, step: f64) -> Result<ParamGrads>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut grads = ParamGrads::zeros_like(params);
    let lens = [
        params.w1.len(),
        params.b1.len(),
        params.w2.len(),
        params.b2.len(),
    ];
    for array in 0..4 {
        for idx in 0..lens[array] {
            let mut plus = params.clone();
            *trainable_entry_mut(&mut plus, array, idx) += step;
            let mut minus = params.clone();
            *trainable_entry_mut(&mut minus, array, idx) -= step;
            let g = (f(&plus)? - f(&minus)?) / (2.0 * step);
            match array {
                0 => grads.w1.data_mut()[idx] = g,
                1 => grads.b1.data_mut()[idx] = g,
                2 => grads.w2.data_mut()[idx] = g,
                3 => grads.b2.data_mut()[idx] = g,
                _ => unreachable!(),
            }
        }
    }
    let mut plus = params.clone();
    plus.scale += step;
    let mut minus = params.clone();
    minus.scale -= step;
    grads.scale = (f(&plus)? - f(&minus)?) / (2.0 * step);
    Ok(grads)
}

/// The worst relative discrepancy between analytic and numeric
/// gradients for one term on one configuration.
#[derive(Debug, Clone)]
pub struct TermCheck {
    pub term: &'static str,
    pub max_rel_err: f64,
    pub worst_entry: String,
    pub checked_entries: usize,
    pub pass: bool,
}

fn compare(analytic: &ParamGrads, numeric: &ParamGrads) -> (f64, String, usize) {
    let mut worst = 0.0;
    let mut worst_entry = String::from("-");
    let mut checked = 0usize;
    let mut consider = |a: f64, n: f64, name: String| {
        if a.abs() < SKIP_BELOW && n.abs() < SKIP_BELOW {
            return;
        }
        checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > worst {
            worst = rel;
            worst_entry = name;
        }
    };
    let pairs = [
        (analytic.w1.data(), numeric.w1.data(), "w1"),
        (analytic.b1.data(), numeric.b1.data(), "b1"),
        (analytic.w2.data(), numeric.w2.data(), "w2"),
        (analytic.b2.data(), numeric.b2.data(), "b2"),
    ];
    for (a, n, name) in pairs {
        for (idx, (&av, &nv)) in a.iter().zip(n).enumerate() {
            consider(av, nv, format!("{name}[{idx}]"));
        }
    }
    consider(analytic.scale, numeric.scale, "scale".into());
    (worst, worst_entry, checked)
}

/// Check one term on one configuration.
pub fn check_term(ctx: &ProbeContext, term: LossTerm) -> Result<TermCheck> {
    let (_, analytic) = ctx.grad(term)?;
    let numeric = finite_difference_grad(&ctx.params, |p| ctx.eval(p, term), FD_STEP)?;
    let (max_rel_err, worst_entry, checked_entries) = compare(&analytic, &numeric);
    Ok(TermCheck {
        term: term.name(),
        max_rel_err,
        worst_entry,
        checked_entries,
        pass: max_rel_err < REL_TOL,
    })
}

/// Worst case across trials for each loss term.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub trials: usize,
    pub per_term: Vec<TermCheck>,
    pub pass: bool,
}

/// Run `trials` random configurations through every loss term. The
/// frozen embeddings are additionally asserted to receive exactly zero
/// gradient.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut per_term: Vec<TermCheck> = ALL_TERMS
        .iter()
        .map(|t| TermCheck {
            term: t.name(),
            max_rel_err: 0.0,
            worst_entry: "-".into(),
            checked_entries: 0,
            pass: true,
        })
        .collect();
    for trial in 0..trials {
        let ctx = random_context(seed.wrapping_add(trial as u64))?;
        for (i, &term) in ALL_TERMS.iter().enumerate() {
            let (_, analytic) = ctx.grad(term)?;
            if analytic.class_embed.data().iter().any(|&g| g != 0.0) {
                return Err(crate::Error::InvalidArgument(
                    "frozen embeddings received gradient".into(),
                ));
            }
            let check = check_term(&ctx, term)?;
            per_term[i].checked_entries += check.checked_entries;
            if check.max_rel_err > per_term[i].max_rel_err {
                per_term[i].max_rel_err = check.max_rel_err;
                per_term[i].worst_entry = format!("trial {trial}: {}", check.worst_entry);
            }
            per_term[i].pass &= check.pass;
        }
    }
    let pass = per_term.iter().all(|t| t.pass);
    Ok(GradcheckReport {
        trials,
        per_term,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_finite_differences_across_terms() {
        // a slice of the acceptance gate, kept small for unit runtime
        let report = run_gradcheck(4, 2024).unwrap();
        for t in &report.per_term {
            assert!(
                t.pass,
                "{}: max rel err {} at {}",
                t.term, t.max_rel_err, t.worst_entry
            );
            assert!(t.checked_entries > 0, "{} checked nothing", t.term);
        }
    }

    #[test]
    fn fd_oracle_exact_on_linear_probe() {
        // loss = sum of w1 entries has gradient one everywhere in w1
        let ctx = random_context(5).unwrap();
        let g = finite_difference_grad(
            &ctx.params,
            |p| Ok(p.w1.data().iter().sum::<f64>()),
            FD_STEP,
        )
        .unwrap();
        for &v in g.w1.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        for &v in g.w2.data() {
            assert!(v.abs() < 1e-9);
        }
    }
}
