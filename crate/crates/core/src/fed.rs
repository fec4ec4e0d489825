//! The federation engine: round loop, client sampling, local training
//! in every mode, FedAvg and FedSWA aggregation, the frozen prior
//! teacher, and centralized baselines (server pretraining and pooled
//! self-training).
//!
//! Local trainings are pure functions of (broadcast params, client
//! data, per-round derived stream), so rounds parallelize across
//! clients without changing any result, and aggregation reduces over
//! client ids in sorted order with pairwise summation.

use crate::augment::{cutmix, make_views, AugmentConfig, CutmixViews, ViewBundle};
use crate::eval::evaluate_model;
use crate::loss::{
    centralized_objective, consistency_terms, make_pseudo_labels, mix_pseudo_labels,
    supervised_ce_terms, unsupervised_objective, LossBreakdown, LossParts, PseudoLabels,
};
use crate::model::{
    ema_update, forward_probs, init_params, sgd_step, GradTape, ModelDims, ParamGrads, ParamSet,
    TeacherState,
};
use crate::rng::{derive_rng, stream};
use crate::sched::{fedswa_lr, lambda_mclip, poly_lr, ScheduleKind, ScheduleSpec};
use crate::synthdata::{ClientDataset, LabeledImage};
use crate::tensor::{pairwise_sum, NdArray};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    FedAvg,
    FedSwa,
}

impl Aggregator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::FedSwa => "fedswa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregator::FedAvg),
            "fedswa" => Ok(Aggregator::FedSwa),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator `{other}` (want fedavg | fedswa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Unsup,
    Semisup,
    Sup,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Unsup => "unsup",
            TrainMode::Semisup => "semisup",
            TrainMode::Sup => "sup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unsup" => Ok(TrainMode::Unsup),
            "semisup" => Ok(TrainMode::Semisup),
            "sup" => Ok(TrainMode::Sup),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (want unsup | semisup | sup)"
            ))),
        }
    }
}

/// Where the pseudo-label teacher of the federated stage comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    /// re-frozen from each round's broadcast model
    FrozenRound,
    /// a server-side EMA of the global iterates, persisted across
    /// rounds
    ServerEma,
}

impl TeacherSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            TeacherSource::FrozenRound => "frozen",
            TeacherSource::ServerEma => "ema",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TeacherSource::FrozenRound),
            "ema" => Ok(TeacherSource::ServerEma),
            other => Err(Error::InvalidArgument(format!(
                "unknown teacher source `{other}` (want frozen | ema)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaWeighting {
    Uniform,
    Size,
}

impl SwaWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            SwaWeighting::Uniform => "uniform",
            SwaWeighting::Size => "size",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SwaWeighting::Uniform),
            "size" => Ok(SwaWeighting::Size),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting `{other}` (want uniform | size)"
            ))),
        }
    }
}

/// How schedule progress is measured for the polynomial decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    PerRound,
    PerStep,
}

impl Progress {
    pub fn as_str(&self) -> &'static str {
        match self {
            Progress::PerRound => "per_round",
            Progress::PerStep => "per_step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_round" => Ok(Progress::PerRound),
            "per_step" => Ok(Progress::PerStep),
            other => Err(Error::InvalidArgument(format!(
                "unknown progress granularity `{other}` (want per_round | per_step)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cons: f64,
    pub lambda_t: f64,
    /// initial distillation weight; decays linearly to 0 over rounds
    pub lambda_mclip0: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cons: 1.0,
            lambda_t: 1.0,
            lambda_mclip0: 0.1,
        }
    }
}

/// Federation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub aggregator: Aggregator,
    pub mode: TrainMode,
    /// server EMA coefficient of FedSWA; 1 reduces to plain averaging
    pub gamma_swa: f64,
    pub swa_weighting: SwaWeighting,
    /// base learning rate (eta0 of the linear decay, eta_ell of the
    /// polynomial); 0 disables updates
    pub eta: f64,
    /// final-LR factor of the FedSWA local linear decay
    pub fedswa_delta: f64,
    pub poly_power: f64,
    pub poly_rho: f64,
    pub progress: Progress,
    pub weights: LossWeights,
    pub tau: f64,
    pub tau_t: f64,
    pub tau_p: f64,
    pub ohem_keep: f64,
    pub teacher: TeacherSource,
    pub gamma_ema: f64,
    /// fraction of each client's images that keep labels in semisup
    pub label_fraction: f64,
    pub augment: AugmentConfig,
    pub eval_every: usize,
    pub prior_distill: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            clients_per_round: 5,
            local_epochs: 1,
            batch_size: 4,
            aggregator: Aggregator::FedSwa,
            mode: TrainMode::Unsup,
            gamma_swa: 0.5,
            swa_weighting: SwaWeighting::Uniform,
            eta: 0.002,
            fedswa_delta: 0.1,
            poly_power: 0.9,
            poly_rho: 0.55,
            progress: Progress::PerRound,
            weights: LossWeights::default(),
            tau: 0.9,
            tau_t: 0.9,
            tau_p: 0.9,
            ohem_keep: 1.0,
            teacher: TeacherSource::FrozenRound,
            gamma_ema: 0.996,
            label_fraction: 0.25,
            augment: AugmentConfig::default(),
            eval_every: 1,
            prior_distill: true,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, total_clients: usize) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > total_clients {
            return Err(Error::InvalidArgument(format!(
                "clients_per_round {} outside [1, {total_clients}]",
                self.clients_per_round
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidArgument("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_swa) {
            return Err(Error::InvalidArgument(format!(
                "gamma_swa {} outside [0, 1]",
                self.gamma_swa
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma_ema) {
            return Err(Error::InvalidArgument(format!(
                "gamma_ema {} outside [0, 1]",
                self.gamma_ema
            )));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::InvalidArgument(format!(
                "label_fraction {} outside [0, 1]",
                self.label_fraction
            )));
        }
        for (name, v) in [("tau", self.tau), ("tau_t", self.tau_t), ("tau_p", self.tau_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta {} invalid", self.eta)));
        }
        if self.eta > 0.0 {
            self.linear_spec(1).validate()?;
            self.poly_spec().validate()?;
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        if !(self.ohem_keep > 0.0 && self.ohem_keep <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ohem_keep {} outside (0, 1]",
                self.ohem_keep
            )));
        }
        self.augment.validate()
    }

    fn linear_spec(&self, horizon: usize) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::FedswaLinear,
            eta: self.eta,
            delta: self.fedswa_delta,
            power: self.poly_power.max(0.5),
            rho: self.poly_rho,
            horizon,
        }
    }

    fn poly_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::Polynomial,
            eta: self.eta,
            delta: self.fedswa_delta,
            power: self.poly_power,
            rho: self.poly_rho,
            horizon: self.rounds.max(1),
        }
    }
}

/// Frozen predictor distilled from on unlabeled data; never updated
/// after construction.
#[derive(Debug, Clone)]
pub struct PriorTeacher {
    pub params: ParamSet,
    pub tau_p: f64,
}

/// Snapshot a pretrained model as the frozen prior.
pub fn make_prior_teacher(pretrained: &ParamSet, tau_p: f64) -> PriorTeacher {
    PriorTeacher {
        params: pretrained.clone(),
        tau_p,
    }
}

impl PriorTeacher {
    /// Confidence-masked pseudo-labels on a weak view.
    pub fn weak_pseudo_labels(&self, weak: &NdArray) -> Result<PseudoLabels> {
        Ok(make_pseudo_labels(
            &forward_probs(&self.params, weak, None)?,
            self.tau_p,
        ))
    }
}

/// Uniform sample of `m` distinct client ids without replacement,
/// deterministic per (seed, round), returned sorted ascending.
pub fn sample_clients(total: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > total {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {total} clients"
        )));
    }
    let mut rng = derive_rng(seed, &[stream::SAMPLE, round as u64]);
    let mut ids: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: the first m entries become the sample
    for i in 0..m {
        let j = rng.random_range(i..total);
        ids.swap(i, j);
    }
    ids.truncate(m);
    ids.sort_unstable();
    Ok(ids)
}

/// One client's returned model plus bookkeeping for aggregation and
/// reporting.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamSet,
    pub n_images: usize,
    pub breakdown: LossBreakdown,
    pub mean_lr: f64,
}

fn aggregate_weighted(sorted: &[(&ParamSet, f64)]) -> ParamSet {
    let template = sorted[0].0;
    let mut scratch = vec![0.0; sorted.len()];
    let mut combine = |pick: &dyn Fn(&ParamSet) -> &[f64], len: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        for e in 0..len {
            for (k, (p, a)) in sorted.iter().enumerate() {
                scratch[k] = a * pick(p)[e];
            }
            out.push(pairwise_sum(&scratch));
        }
        out
    };
    let w1 = combine(&|p| p.w1.data(), template.w1.len());
    let b1 = combine(&|p| p.b1.data(), template.b1.len());
    let w2 = combine(&|p| p.w2.data(), template.w2.len());
    let b2 = combine(&|p| p.b2.data(), template.b2.len());
    let scale = {
        let vals: Vec<f64> = sorted.iter().map(|(p, a)| a * p.scale).collect();
        pairwise_sum(&vals)
    };
    ParamSet {
        w1: NdArray::new(template.w1.shape().to_vec(), w1).unwrap(),
        b1: NdArray::new(template.b1.shape().to_vec(), b1).unwrap(),
        w2: NdArray::new(template.w2.shape().to_vec(), w2).unwrap(),
        b2: NdArray::new(template.b2.shape().to_vec(), b2).unwrap(),
        // frozen arrays are identical across updates; copy, never blend
        class_embed: template.class_embed.clone(),
        scale,
    }
}

/// Dataset-size-weighted average of client models, reduced over sorted
/// client ids with pairwise summation.
pub fn agg_fedavg(updates: &[ClientUpdate]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no updates to aggregate".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let total: usize = sorted.iter().map(|u| u.n_images).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregate of empty clients".into()));
    }
    let weighted: Vec<(&ParamSet, f64)> = sorted
        .iter()
        .map(|u| (&u.params, u.n_images as f64 / total as f64))
        .collect();
    Ok(aggregate_weighted(&weighted))
}

/// FedAvg mixing weights (n_k over the round total), sorted by id.
pub fn fedavg_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let total: usize = sorted.iter().map(|u| u.n_images).sum();
    sorted
        .iter()
        .map(|u| u.n_images as f64 / total as f64)
        .collect()
}

/// Server-side EMA over the (uniform or size-weighted) mean of client
/// models: w + gamma (v - w). gamma = 1 is exactly the plain average;
/// gamma = 0 leaves the global model untouched.
pub fn agg_fedswa(
    global: &ParamSet,
    updates: &[ClientUpdate],
    gamma_swa: f64,
    weighting: SwaWeighting,
) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no updates to aggregate".into()));
    }
    if gamma_swa == 0.0 {
        return Ok(global.clone());
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let weighted: Vec<(&ParamSet, f64)> = match weighting {
        SwaWeighting::Uniform => {
            let a = 1.0 / sorted.len() as f64;
            sorted.iter().map(|u| (&u.params, a)).collect()
        }
        SwaWeighting::Size => {
            let total: usize = sorted.iter().map(|u| u.n_images).sum();
            sorted
                .iter()
                .map(|u| (&u.params, u.n_images as f64 / total as f64))
                .collect()
        }
    };
    let mean = aggregate_weighted(&weighted);
    if gamma_swa == 1.0 {
        return Ok(mean);
    }
    let blend = |w: &NdArray, v: &NdArray| {
        let data: Vec<f64> = w
            .data()
            .iter()
            .zip(v.data())
            .map(|(wv, vv)| wv + gamma_swa * (vv - wv))
            .collect();
        NdArray::new(w.shape().to_vec(), data).unwrap()
    };
    Ok(ParamSet {
        w1: blend(&global.w1, &mean.w1),
        b1: blend(&global.b1, &mean.b1),
        w2: blend(&global.w2, &mean.w2),
        b2: blend(&global.b2, &mean.b2),
        class_embed: global.class_embed.clone(),
        scale: global.scale + gamma_swa * (mean.scale - global.scale),
    })
}

/// Which images of a client keep their labels under a mode. The
/// semisup subset is seeded once per client, not per round.
pub fn label_visibility(cfg: &FedConfig, client: &ClientDataset) -> Vec<bool> {
    let n = client.images.len();
    match cfg.mode {
        TrainMode::Sup => vec![true; n],
        TrainMode::Unsup => vec![false; n],
        TrainMode::Semisup => {
            let keep = ((cfg.label_fraction * n as f64).round() as usize).min(n);
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = derive_rng(cfg.seed, &[stream::LABEL_KEEP, client.client_id as u64]);
            idx.shuffle(&mut rng);
            let mut vis = vec![false; n];
            for &i in idx.iter().take(keep) {
                vis[i] = true;
            }
            vis
        }
    }
}

/// Which images the consistency-style terms cover. Centralized
/// pretraining keeps them on the unlabeled batch; federated
/// (semi-)unsupervised training applies them to every image with the
/// supervised term added on labeled ones; fully supervised
/// fine-tuning is plain cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConsScope {
    All,
    UnlabeledOnly,
    None,
}

struct StepCtx<'a> {
    /// weak-view pseudo-label source for the consistency terms
    pl_source: &'a ParamSet,
    /// teacher term (params, tau_t, lambda_t); None disables it
    teacher: Option<(&'a ParamSet, f64, f64)>,
    prior: Option<&'a PriorTeacher>,
    lambda_mclip: f64,
    lambda_cons: f64,
    tau: f64,
    ohem_keep: f64,
    augment: &'a AugmentConfig,
    cons_scope: ConsScope,
    /// supervised fine-tuning averages the CE over the weak and both
    /// strong views; server pretraining keeps the weak view only
    ce_on_strong_views: bool,
}

/// One batch: build views, splice cutmix pairs, gather detached
/// pseudo-labels, run the tape, return gradients and raw components.
fn train_step(
    params: &ParamSet,
    ctx: &StepCtx,
    batch: &[(&LabeledImage, bool)],
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrads, LossParts)> {
    let dims = params.dims();
    let use_dropout = ctx.augment.dropout_prob > 0.0;

    let bundles: Vec<ViewBundle> = batch
        .iter()
        .map(|(img, _)| make_views(&img.pixels, ctx.augment, dims.hidden, rng))
        .collect::<Result<_>>()?;
    let mixed: Option<Vec<CutmixViews>> = if ctx.augment.cutmix && batch.len() > 1 {
        Some(
            (0..batch.len())
                .map(|i| cutmix(&bundles[i], &bundles[(i + 1) % batch.len()], rng))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    // detached pseudo-label sources on unmixed weak views
    let cons_targets: Vec<usize> = match ctx.cons_scope {
        ConsScope::All => (0..batch.len()).collect(),
        ConsScope::UnlabeledOnly => (0..batch.len()).filter(|&i| !batch[i].1).collect(),
        ConsScope::None => Vec::new(),
    };
    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].1).collect();
    let mut student_pl: Vec<Option<PseudoLabels>> = vec![None; batch.len()];
    let mut teacher_pl: Vec<Option<PseudoLabels>> = vec![None; batch.len()];
    let mut prior_pl: Vec<Option<PseudoLabels>> = vec![None; batch.len()];
    for &i in &cons_targets {
        let weak = &bundles[i].weak;
        student_pl[i] = Some(make_pseudo_labels(
            &forward_probs(ctx.pl_source, weak, None)?,
            ctx.tau,
        ));
        if let Some((teacher, tau_t, _)) = ctx.teacher {
            teacher_pl[i] = Some(make_pseudo_labels(
                &forward_probs(teacher, weak, None)?,
                tau_t,
            ));
        }
        if let Some(prior) = ctx.prior {
            prior_pl[i] = Some(prior.weak_pseudo_labels(weak)?);
        }
    }
    // pseudo-labels travel with their pixels under cutmix; a labeled
    // partner has none, so its spliced region is masked out
    let mix = |pls: &[Option<PseudoLabels>], i: usize| -> Option<PseudoLabels> {
        let own = pls[i].as_ref()?;
        match &mixed {
            Some(m) => {
                let partner = (i + 1) % batch.len();
                let spliced = match pls[partner].as_ref() {
                    Some(p) => mix_pseudo_labels(own, p, &m[i].from_b),
                    None => {
                        let blank = PseudoLabels {
                            labels: vec![0; own.len()],
                            conf: vec![0.0; own.len()],
                            mask: vec![false; own.len()],
                            threshold: own.threshold,
                        };
                        mix_pseudo_labels(own, &blank, &m[i].from_b)
                    }
                };
                Some(spliced)
            }
            None => Some(own.clone()),
        }
    };

    let mut parts = LossParts::default();
    let mut tape = GradTape::new(params);
    let bl = labeled.len().max(1) as f64;
    let bu = cons_targets.len().max(1) as f64;

    for &i in &labeled {
        let (img, _) = batch[i];
        let labels = img.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("labeled image {i} carries no labels"))
        })?;
        let labels = bundles[i]
            .geometry
            .apply_to_labels(labels, img.height(), img.width());
        // the un-spliced strong views: cutmix pixels would need the
        // partner's labels, which semisup may not be allowed to see
        let views: Vec<(&NdArray, Option<&crate::model::DropoutMask>)> =
            if ctx.ce_on_strong_views {
                vec![
                    (&bundles[i].weak, None),
                    (
                        &bundles[i].strong1,
                        if use_dropout { Some(&bundles[i].dropout1) } else { None },
                    ),
                    (
                        &bundles[i].strong2,
                        if use_dropout { Some(&bundles[i].dropout2) } else { None },
                    ),
                ]
            } else {
                vec![(&bundles[i].weak, None)]
            };
        let share = 1.0 / views.len() as f64;
        for (image, mask) in views {
            let pass = tape.forward(image, mask)?;
            let terms = supervised_ce_terms(tape.probs(pass), &labels, ctx.ohem_keep)?;
            parts.l_sup += share * terms.value / bl;
            tape.add_terms(pass, &terms, share / bl);
        }
    }

    let mut mask_frac = 0.0;
    for &i in &cons_targets {
        let (s1_img, s2_img) = match &mixed {
            Some(m) => (&m[i].strong1, &m[i].strong2),
            None => (&bundles[i].strong1, &bundles[i].strong2),
        };
        let d1 = if use_dropout { Some(&bundles[i].dropout1) } else { None };
        let d2 = if use_dropout { Some(&bundles[i].dropout2) } else { None };
        let s1 = tape.forward(s1_img, d1)?;
        let s2 = tape.forward(s2_img, d2)?;

        let spl = mix(&student_pl, i).expect("student pseudo-labels exist for target");
        mask_frac += spl.masked_in_fraction();
        let c1 = consistency_terms(tape.probs(s1), &spl)?;
        parts.l_cons_s1 += c1.value / bu;
        tape.add_terms(s1, &c1, ctx.lambda_cons / bu);
        let c2 = consistency_terms(tape.probs(s2), &spl)?;
        parts.l_cons_s2 += c2.value / bu;
        tape.add_terms(s2, &c2, ctx.lambda_cons / bu);

        if let Some((_, _, lambda_t)) = ctx.teacher {
            let tpl = mix(&teacher_pl, i).expect("teacher pseudo-labels exist");
            let t = consistency_terms(tape.probs(s1), &tpl)?;
            parts.l_teacher += t.value / bu;
            tape.add_terms(s1, &t, lambda_t / bu);
        }
        if ctx.prior.is_some() {
            let ppl = mix(&prior_pl, i).expect("prior pseudo-labels exist");
            let m1 = consistency_terms(tape.probs(s1), &ppl)?;
            parts.l_mclip_s1 += m1.value / bu;
            tape.add_terms(s1, &m1, ctx.lambda_mclip / bu);
            let m2 = consistency_terms(tape.probs(s2), &ppl)?;
            parts.l_mclip_s2 += m2.value / bu;
            tape.add_terms(s2, &m2, ctx.lambda_mclip / bu);
        }
    }
    parts.masked_pixel_fraction = if cons_targets.is_empty() {
        0.0
    } else {
        mask_frac / cons_targets.len() as f64
    };

    let (_, grads) = tape.finish()?;
    Ok((grads, parts))
}

/// total = l_sup + lambda_t l_teacher + lambda_cons (s1 + s2)
///       + lambda_mclip (m1 + m2); unused parts are zero, so one
/// assembly covers all three modes.
fn assemble(
    parts: &LossParts,
    lambda_t: f64,
    lambda_cons: f64,
    lambda_mclip: f64,
) -> LossBreakdown {
    let base = unsupervised_objective(parts, lambda_t, lambda_cons, lambda_mclip);
    LossBreakdown {
        total: parts.l_sup + base.total,
        ..base
    }
}

/// E local epochs of SGD on one client, starting from the broadcast
/// model. The pseudo-label teacher defaults to a frozen copy of the
/// broadcast; `teacher_override` supplies the server-EMA teacher
/// instead.
pub fn local_train(
    broadcast: &ParamSet,
    client: &ClientDataset,
    cfg: &FedConfig,
    round: usize,
    prior: Option<&PriorTeacher>,
    teacher_override: Option<&ParamSet>,
) -> Result<ClientUpdate> {
    if client.is_empty() {
        return Err(Error::EmptyClient);
    }
    broadcast.check_finite()?;
    let n = client.images.len();
    let labeled = label_visibility(cfg, client);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_iters = cfg.local_epochs * batches_per_epoch;
    let linear = cfg.linear_spec(total_iters);
    let poly = cfg.poly_spec();
    let teacher = teacher_override.unwrap_or(broadcast);
    let lambda_mclip_round = if prior.is_some() && cfg.prior_distill {
        lambda_mclip(round, cfg.rounds.max(1), cfg.weights.lambda_mclip0)
    } else {
        0.0
    };
    let supervised_only = cfg.mode == TrainMode::Sup;
    let use_prior = if !supervised_only && cfg.prior_distill && lambda_mclip_round > 0.0 {
        prior
    } else {
        None
    };
    let use_teacher = if supervised_only {
        None
    } else {
        Some((teacher, cfg.tau_t, cfg.weights.lambda_t))
    };

    let mut rng = derive_rng(
        cfg.seed,
        &[stream::LOCAL, round as u64, client.client_id as u64],
    );
    let mut params = broadcast.clone();
    let mut iter = 0usize;
    let mut sum_parts = LossParts::default();
    let mut sum_lr = 0.0;

    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = if cfg.eta == 0.0 {
                0.0
            } else {
                match cfg.aggregator {
                    Aggregator::FedSwa => fedswa_lr(&linear, iter)?,
                    Aggregator::FedAvg => {
                        let s = match cfg.progress {
                            Progress::PerRound => round as f64 / cfg.rounds.max(1) as f64,
                            Progress::PerStep => {
                                (round as f64 + iter as f64 / total_iters as f64)
                                    / cfg.rounds.max(1) as f64
                            }
                        };
                        poly_lr(&poly, s)
                    }
                }
            };
            let batch: Vec<(&LabeledImage, bool)> = chunk
                .iter()
                .map(|&i| (&client.images[i], labeled[i]))
                .collect();
            let pl_source = params.clone();
            let ctx = StepCtx {
                pl_source: &pl_source,
                teacher: use_teacher,
                prior: use_prior,
                lambda_mclip: lambda_mclip_round,
                lambda_cons: cfg.weights.lambda_cons,
                tau: cfg.tau,
                ohem_keep: cfg.ohem_keep,
                augment: &cfg.augment,
                cons_scope: if supervised_only {
                    ConsScope::None
                } else {
                    ConsScope::All
                },
                ce_on_strong_views: true,
            };
            let (grads, parts) = train_step(&params, &ctx, &batch, &mut rng)?;
            params = sgd_step(&params, &grads, lr);
            params.check_finite().map_err(|_| Error::Diverged)?;
            sum_parts = add_parts(&sum_parts, &parts);
            sum_lr += lr;
            iter += 1;
        }
    }
    let mean_parts = scale_parts(&sum_parts, 1.0 / total_iters as f64);
    let breakdown = assemble(
        &mean_parts,
        cfg.weights.lambda_t,
        cfg.weights.lambda_cons,
        lambda_mclip_round,
    );
    Ok(ClientUpdate {
        client_id: client.client_id,
        params,
        n_images: n,
        breakdown,
        mean_lr: sum_lr / total_iters as f64,
    })
}

fn add_parts(a: &LossParts, b: &LossParts) -> LossParts {
    LossParts {
        l_sup: a.l_sup + b.l_sup,
        l_cons_s1: a.l_cons_s1 + b.l_cons_s1,
        l_cons_s2: a.l_cons_s2 + b.l_cons_s2,
        l_teacher: a.l_teacher + b.l_teacher,
        l_mclip_s1: a.l_mclip_s1 + b.l_mclip_s1,
        l_mclip_s2: a.l_mclip_s2 + b.l_mclip_s2,
        masked_pixel_fraction: a.masked_pixel_fraction + b.masked_pixel_fraction,
    }
}

fn scale_parts(p: &LossParts, s: f64) -> LossParts {
    LossParts {
        l_sup: p.l_sup * s,
        l_cons_s1: p.l_cons_s1 * s,
        l_cons_s2: p.l_cons_s2 * s,
        l_teacher: p.l_teacher * s,
        l_mclip_s1: p.l_mclip_s1 * s,
        l_mclip_s2: p.l_mclip_s2 * s,
        masked_pixel_fraction: p.masked_pixel_fraction * s,
    }
}

fn mean_breakdown(updates: &[ClientUpdate]) -> LossBreakdown {
    let n = updates.len() as f64;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut out = LossBreakdown::default();
    for u in sorted {
        let b = &u.breakdown;
        out.l_sup += b.l_sup / n;
        out.l_cons_s1 += b.l_cons_s1 / n;
        out.l_cons_s2 += b.l_cons_s2 / n;
        out.l_teacher += b.l_teacher / n;
        out.l_mclip_s1 += b.l_mclip_s1 / n;
        out.l_mclip_s2 += b.l_mclip_s2 / n;
        out.total += b.total / n;
        out.masked_pixel_fraction += b.masked_pixel_fraction / n;
    }
    out
}

/// Metrics of one evaluated round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// 1-based round number
    pub round: usize,
    pub mode: TrainMode,
    pub aggregator: Aggregator,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    pub miou_eval: f64,
    pub per_class: Vec<f64>,
    pub client_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub params: ParamSet,
}

/// The round loop: sample clients, broadcast, train locally in
/// parallel, aggregate, evaluate on the held-out domain every
/// `eval_every` rounds. Source data is not reachable from here: the
/// inputs are client datasets and the eval split only.
pub fn run_federation(
    w0: &ParamSet,
    clients: &[ClientDataset],
    eval: &[LabeledImage],
    cfg: &FedConfig,
    prior: Option<&PriorTeacher>,
) -> Result<FederationOutcome> {
    cfg.validate(clients.len())?;
    let mut global = w0.clone();
    let mut server_teacher = match cfg.teacher {
        TeacherSource::ServerEma => Some(TeacherState::new(w0.clone(), cfg.gamma_ema)),
        TeacherSource::FrozenRound => None,
    };
    let mut records = Vec::new();

    for t in 0..cfg.rounds {
        let ids = sample_clients(clients.len(), cfg.clients_per_round, t, cfg.seed)?;
        let teacher_params = server_teacher.as_ref().map(|s| s.params.clone());
        let global_ref = &global;
        let teacher_ref = teacher_params.as_ref();
        let updates: Vec<ClientUpdate> = ids
            .par_iter()
            .map(|&k| local_train(global_ref, &clients[k], cfg, t, prior, teacher_ref))
            .collect::<Result<_>>()?;

        global = match cfg.aggregator {
            Aggregator::FedAvg => agg_fedavg(&updates)?,
            Aggregator::FedSwa => agg_fedswa(&global, &updates, cfg.gamma_swa, cfg.swa_weighting)?,
        };
        if let Some(state) = server_teacher.take() {
            server_teacher = Some(ema_update(&state, &global));
        }

        let round = t + 1;
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let (per_class, miou_eval) = if eval.is_empty() {
                (vec![f64::NAN; global.dims().classes], f64::NAN)
            } else {
                evaluate_model(&global, eval)?
            };
            let lr = updates.iter().map(|u| u.mean_lr).sum::<f64>() / updates.len() as f64;
            records.push(RoundRecord {
                round,
                mode: cfg.mode,
                aggregator: cfg.aggregator,
                lr,
                breakdown: mean_breakdown(&updates),
                miou_eval,
                per_class,
                client_ids: ids,
            });
        }
    }
    Ok(FederationOutcome {
        records,
        params: global,
    })
}

/// Centralized self-training on pooled target data: the identical
/// local-training logic, one pool, no aggregation. The learning rate
/// anneals with the polynomial schedule over rounds, as a centralized
/// run would, regardless of the aggregator the config names.
pub fn cust(
    w0: &ParamSet,
    pool: &ClientDataset,
    eval: &[LabeledImage],
    cfg: &FedConfig,
    prior: Option<&PriorTeacher>,
) -> Result<FederationOutcome> {
    if pool.is_empty() {
        return Err(Error::EmptyClient);
    }
    let cfg = &FedConfig {
        aggregator: Aggregator::FedAvg,
        ..cfg.clone()
    };
    let mut params = w0.clone();
    let mut server_teacher = match cfg.teacher {
        TeacherSource::ServerEma => Some(TeacherState::new(w0.clone(), cfg.gamma_ema)),
        TeacherSource::FrozenRound => None,
    };
    let mut records = Vec::new();
    for t in 0..cfg.rounds {
        let teacher_params = server_teacher.as_ref().map(|s| s.params.clone());
        let update = local_train(&params, pool, cfg, t, prior, teacher_params.as_ref())?;
        params = update.params.clone();
        if let Some(state) = server_teacher.take() {
            server_teacher = Some(ema_update(&state, &params));
        }
        let round = t + 1;
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let (per_class, miou_eval) = if eval.is_empty() {
                (vec![f64::NAN; params.dims().classes], f64::NAN)
            } else {
                evaluate_model(&params, eval)?
            };
            records.push(RoundRecord {
                round,
                mode: cfg.mode,
                aggregator: cfg.aggregator,
                lr: update.mean_lr,
                breakdown: update.breakdown,
                miou_eval,
                per_class,
                client_ids: vec![pool.client_id],
            });
        }
    }
    Ok(FederationOutcome { records, params })
}

/// Per-epoch pretraining settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub poly_power: f64,
    pub poly_rho: f64,
    /// fraction of source images treated as unlabeled, activating the
    /// consistency and distillation terms
    pub unlabeled_fraction: f64,
    pub ohem_keep: f64,
    pub tau: f64,
    pub tau_p: f64,
    pub lambda_cons: f64,
    pub lambda_mclip0: f64,
    /// maintain an EMA teacher and draw weak-view pseudo-labels from
    /// it instead of the student
    pub ema_teacher: bool,
    pub gamma_ema: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            eta: 0.05,
            poly_power: 0.9,
            poly_rho: 0.0,
            unlabeled_fraction: 0.0,
            ohem_keep: 1.0,
            tau: 0.9,
            tau_p: 0.9,
            lambda_cons: 1.0,
            lambda_mclip0: 0.1,
            ema_teacher: false,
            gamma_ema: 0.996,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// One pretraining epoch's averaged losses and held-out mIoU.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    pub miou_eval: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub epochs: Vec<EpochRecord>,
    /// true when epoch losses were non-increasing in at least 80% of
    /// consecutive pairs (soft diagnostic, not a failure)
    pub loss_monotone_ok: bool,
}

/// Server pretraining on the labeled source set. With an unlabeled
/// fraction configured, consistency and prior-distillation terms join
/// the supervised loss; the prior is then a frozen snapshot of the
/// initial model, which the confidence mask keeps quiet until the
/// supervised signal has shaped it.
pub fn pretrain(
    source: &[LabeledImage],
    eval: &[LabeledImage],
    dims: &ModelDims,
    spec: &PretrainSpec,
) -> Result<PretrainOutcome> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty source set".into()));
    }
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    spec.augment.validate()?;
    let mut params = init_params(spec.seed, dims);
    let mut teacher = if spec.ema_teacher {
        Some(TeacherState::new(params.clone(), spec.gamma_ema))
    } else {
        None
    };
    let prior = if spec.unlabeled_fraction > 0.0 && spec.lambda_mclip0 > 0.0 {
        Some(make_prior_teacher(&params, spec.tau_p))
    } else {
        None
    };

    // seeded unlabeled subset, fixed across epochs
    let n = source.len();
    let n_unlabeled = ((spec.unlabeled_fraction * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut pick_rng = derive_rng(spec.seed, &[stream::PRETRAIN, 0]);
    idx.shuffle(&mut pick_rng);
    let mut labeled = vec![true; n];
    for &i in idx.iter().take(n_unlabeled) {
        labeled[i] = false;
    }

    let poly = ScheduleSpec {
        kind: ScheduleKind::Polynomial,
        eta: spec.eta.max(f64::MIN_POSITIVE),
        delta: 0.1,
        power: spec.poly_power,
        rho: spec.poly_rho,
        horizon: spec.epochs.max(1),
    };
    let mut rng = derive_rng(spec.seed, &[stream::PRETRAIN, 1]);
    let mut epochs = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let lr = if spec.eta == 0.0 {
            0.0
        } else {
            poly_lr(&poly, epoch as f64 / spec.epochs.max(1) as f64)
        };
        let lambda_m = lambda_mclip(epoch, spec.epochs.max(1), spec.lambda_mclip0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum_parts = LossParts::default();
        let mut steps = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<(&LabeledImage, bool)> =
                chunk.iter().map(|&i| (&source[i], labeled[i])).collect();
            let pl_source = match &teacher {
                Some(t) => t.params.clone(),
                None => params.clone(),
            };
            let ctx = StepCtx {
                pl_source: &pl_source,
                teacher: None,
                prior: if lambda_m > 0.0 { prior.as_ref() } else { None },
                lambda_mclip: lambda_m,
                lambda_cons: spec.lambda_cons,
                tau: spec.tau,
                ohem_keep: spec.ohem_keep,
                augment: &spec.augment,
                cons_scope: ConsScope::UnlabeledOnly,
                ce_on_strong_views: false,
            };
            let (grads, parts) = train_step(&params, &ctx, &batch, &mut rng)?;
            params = sgd_step(&params, &grads, lr);
            params.check_finite().map_err(|_| Error::Diverged)?;
            if let Some(state) = teacher.take() {
                teacher = Some(ema_update(&state, &params));
            }
            sum_parts = add_parts(&sum_parts, &parts);
            steps += 1;
        }
        let mean_parts = scale_parts(&sum_parts, 1.0 / steps.max(1) as f64);
        let breakdown = centralized_objective(&mean_parts, spec.lambda_cons, lambda_m);
        let (per_class, miou_eval) = if eval.is_empty() {
            (vec![f64::NAN; dims.classes], f64::NAN)
        } else {
            evaluate_model(&params, eval)?
        };
        epochs.push(EpochRecord {
            epoch,
            lr,
            breakdown,
            miou_eval,
            per_class,
        });
    }

    let loss_monotone_ok = {
        let totals: Vec<f64> = epochs.iter().map(|e| e.breakdown.total).collect();
        if totals.len() < 2 {
            true
        } else {
            let pairs = totals.len() - 1;
            let ok = totals.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
            ok as f64 / pairs as f64 >= 0.8
        }
    };
    Ok(PretrainOutcome {
        params,
        epochs,
        loss_monotone_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use crate::synthdata::{class_signatures, gen_label_map, render, DomainSpec};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            input_channels: 3,
            hidden: 5,
            feature: 4,
            classes: 3,
        }
    }

    fn tiny_client(id: usize, images: usize, seed: u64) -> ClientDataset {
        let sig = class_signatures(3, 3);
        let dom = DomainSpec {
            id: 1,
            name: "d".into(),
            gain: vec![0.9, 1.0, 1.1],
            bias: vec![0.05, 0.0, -0.05],
            noise_sigma: 0.05,
        };
        let images = (0..images)
            .map(|i| {
                let labels = gen_label_map(seed + i as u64, 4, 4, 3);
                render(&labels, 4, 4, &sig, &dom, seed + i as u64).unwrap()
            })
            .collect();
        ClientDataset {
            client_id: id,
            images,
            domains: vec![1],
        }
    }

    fn const_params(v: f64) -> ParamSet {
        let mut p = init_params(0, &tiny_dims());
        for arr in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
            arr.data_mut().iter_mut().for_each(|x| *x = v);
        }
        p.scale = v;
        p
    }

    fn update_of(id: usize, v: f64, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: const_params(v),
            n_images: n,
            breakdown: LossBreakdown::default(),
            mean_lr: 0.0,
        }
    }

    #[test]
    fn sample_clients_contract() {
        assert_eq!(sample_clients(5, 5, 0, 9).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(1, 1, 3, 9).unwrap(), vec![0]);
        let a = sample_clients(20, 7, 4, 1).unwrap();
        let b = sample_clients(20, 7, 4, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let c = sample_clients(20, 7, 5, 1).unwrap();
        assert_ne!(a, c);
        assert!(sample_clients(3, 4, 0, 0).is_err());
    }

    #[test]
    fn fedavg_scalar_substitution() {
        // w = 0 with n = 1 and w = 4 with n = 3 average to 3
        let agg = agg_fedavg(&[update_of(0, 0.0, 1), update_of(1, 4.0, 3)]).unwrap();
        assert_eq!(agg.w1.data()[0], 3.0);
        assert_eq!(agg.scale, 3.0);
    }

    #[test]
    fn fedavg_idempotent_on_identical_updates() {
        let agg = agg_fedavg(&[update_of(0, 1.25, 7), update_of(1, 1.25, 2)]).unwrap();
        assert_eq!(agg.w1.data()[0], 1.25);
    }

    #[test]
    fn fedavg_matches_scalar_loop_oracle() {
        use rand::Rng;
        let mut rng = derive_rng(3, &[77]);
        for _ in 0..20 {
            let updates: Vec<ClientUpdate> = (0..5)
                .map(|i| update_of(i, rng.random_range(-2.0..2.0), rng.random_range(1..30)))
                .collect();
            let agg = agg_fedavg(&updates).unwrap();
            let total: usize = updates.iter().map(|u| u.n_images).sum();
            let mut want = 0.0;
            for u in &updates {
                want += u.n_images as f64 / total as f64 * u.params.w1.data()[0];
            }
            assert!((agg.w1.data()[0] - want).abs() <= 1e-14);
        }
    }

    #[test]
    fn fedavg_order_independent() {
        let mut updates = vec![
            update_of(2, 0.5, 3),
            update_of(0, -1.0, 5),
            update_of(1, 2.0, 2),
        ];
        let a = agg_fedavg(&updates).unwrap();
        updates.reverse();
        let b = agg_fedavg(&updates).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fedswa_blend_and_degenerate_gammas() {
        let global = const_params(0.0);
        let updates = vec![update_of(0, 2.0, 1)];
        let half = agg_fedswa(&global, &updates, 0.5, SwaWeighting::Uniform).unwrap();
        assert_eq!(half.w1.data()[0], 1.0);

        // gamma 1 is exactly the plain average of the updates
        let updates = vec![update_of(0, 1.0, 1), update_of(1, 3.0, 9)];
        let one = agg_fedswa(&global, &updates, 1.0, SwaWeighting::Uniform).unwrap();
        assert_eq!(one.w1.data()[0], 2.0);
        let sized = agg_fedswa(&global, &updates, 1.0, SwaWeighting::Size).unwrap();
        assert!((sized.w1.data()[0] - 2.8).abs() < 1e-15);

        let zero = agg_fedswa(&global, &updates, 0.0, SwaWeighting::Uniform).unwrap();
        assert_eq!(zero, global);
    }

    #[test]
    fn local_train_zero_lr_is_identity() {
        let client = tiny_client(0, 4, 5);
        let w = init_params(1, &tiny_dims());
        let cfg = FedConfig {
            rounds: 3,
            clients_per_round: 1,
            eta: 0.0,
            local_epochs: 2,
            batch_size: 2,
            ..FedConfig::default()
        };
        let u = local_train(&w, &client, &cfg, 0, None, None).unwrap();
        assert_eq!(u.params, w);
        assert_eq!(u.n_images, 4);
    }

    #[test]
    fn local_train_keeps_embeddings_frozen() {
        let client = tiny_client(0, 4, 6);
        let w = init_params(2, &tiny_dims());
        let cfg = FedConfig {
            rounds: 2,
            clients_per_round: 1,
            eta: 0.05,
            tau: 0.0,
            tau_t: 0.0,
            ..FedConfig::default()
        };
        let u = local_train(&w, &client, &cfg, 1, None, None).unwrap();
        assert_eq!(u.params.class_embed, w.class_embed);
        assert_ne!(u.params.w1, w.w1);
    }

    #[test]
    fn supervised_single_step_equals_sgd_on_ce() {
        // one image, batch 1, one epoch, identity augmentation: the
        // local update must be exactly one SGD step on the CE gradient
        let client = tiny_client(0, 1, 9);
        let w = init_params(3, &tiny_dims());
        let cfg = FedConfig {
            rounds: 4,
            clients_per_round: 1,
            local_epochs: 1,
            batch_size: 1,
            mode: TrainMode::Sup,
            aggregator: Aggregator::FedAvg,
            eta: 0.1,
            poly_rho: 0.0,
            augment: AugmentConfig::identity(),
            prior_distill: false,
            ..FedConfig::default()
        };
        let u = local_train(&w, &client, &cfg, 2, None, None).unwrap();

        let img = &client.images[0];
        let (_, grads) = crate::model::loss_and_grad(&w, |tape| {
            let id = tape.forward(&img.pixels, None)?;
            let t = supervised_ce_terms(tape.probs(id), img.labels.as_ref().unwrap(), 1.0)?;
            tape.add_terms(id, &t, 1.0);
            Ok(())
        })
        .unwrap();
        let lr = poly_lr(&cfg.poly_spec(), 2.0 / 4.0);
        let want = sgd_step(&w, &grads, lr);
        for (a, b) in u.params.w1.data().iter().zip(want.w1.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((u.params.scale - want.scale).abs() < 1e-15);
    }

    #[test]
    fn federation_zero_rounds_returns_init() {
        let clients = vec![tiny_client(0, 3, 1)];
        let w0 = init_params(4, &tiny_dims());
        let cfg = FedConfig {
            rounds: 0,
            clients_per_round: 1,
            ..FedConfig::default()
        };
        let out = run_federation(&w0, &clients, &[], &cfg, None).unwrap();
        assert_eq!(out.params, w0);
        assert!(out.records.is_empty());
    }

    #[test]
    fn cust_equals_single_client_federation() {
        let pool = tiny_client(0, 6, 11);
        let w0 = init_params(7, &tiny_dims());
        let cfg = FedConfig {
            rounds: 3,
            clients_per_round: 1,
            aggregator: Aggregator::FedAvg,
            eta: 0.05,
            batch_size: 2,
            tau: 0.0,
            tau_t: 0.0,
            prior_distill: false,
            ..FedConfig::default()
        };
        let fed = run_federation(&w0, &[pool.clone()], &[], &cfg, None).unwrap();
        let central = cust(&w0, &pool, &[], &cfg, None).unwrap();
        assert_eq!(fed.params, central.params);
    }

    #[test]
    fn empty_client_errors() {
        let empty = ClientDataset {
            client_id: 0,
            images: vec![],
            domains: vec![],
        };
        let w = init_params(0, &tiny_dims());
        let cfg = FedConfig {
            clients_per_round: 1,
            ..FedConfig::default()
        };
        assert!(matches!(
            local_train(&w, &empty, &cfg, 0, None, None),
            Err(Error::EmptyClient)
        ));
    }

    #[test]
    fn prior_teacher_is_frozen_and_strict_threshold_empties_mask() {
        let w = init_params(5, &tiny_dims());
        let prior = make_prior_teacher(&w, 0.9);
        assert_eq!(prior.params, w);

        let img = tiny_client(0, 1, 3).images.remove(0);
        let a = prior.weak_pseudo_labels(&img.pixels).unwrap();
        let b = prior.weak_pseudo_labels(&img.pixels).unwrap();
        assert_eq!(a, b);

        // agreement with the snapshot's own argmax is total
        let logits = forward(&w, &img.pixels, None).unwrap();
        let (own, _) = crate::tensor::argmax_with_conf(&logits);
        assert_eq!(a.labels, own);

        let over = make_prior_teacher(&w, 1.0 + 1e-9);
        let pl = over.weak_pseudo_labels(&img.pixels).unwrap();
        assert!(pl.mask.iter().all(|&m| !m));
    }

    #[test]
    fn label_visibility_by_mode() {
        let client = tiny_client(3, 8, 2);
        let mut cfg = FedConfig {
            label_fraction: 0.25,
            ..FedConfig::default()
        };
        cfg.mode = TrainMode::Sup;
        assert!(label_visibility(&cfg, &client).iter().all(|&v| v));
        cfg.mode = TrainMode::Unsup;
        assert!(label_visibility(&cfg, &client).iter().all(|&v| !v));
        cfg.mode = TrainMode::Semisup;
        let vis = label_visibility(&cfg, &client);
        assert_eq!(vis.iter().filter(|&&v| v).count(), 2);
        // stable across calls
        assert_eq!(vis, label_visibility(&cfg, &client));
    }

    #[test]
    fn pretrain_zero_epochs_returns_init() {
        let images = tiny_client(0, 4, 8).images;
        let spec = PretrainSpec {
            epochs: 0,
            seed: 13,
            ..PretrainSpec::default()
        };
        let out = pretrain(&images, &[], &tiny_dims(), &spec).unwrap();
        assert_eq!(out.params, init_params(13, &tiny_dims()));
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn pretrain_deterministic_per_seed() {
        let images = tiny_client(0, 6, 21).images;
        let spec = PretrainSpec {
            epochs: 3,
            batch_size: 2,
            eta: 0.05,
            seed: 5,
            ..PretrainSpec::default()
        };
        let a = pretrain(&images, &[], &tiny_dims(), &spec).unwrap();
        let b = pretrain(&images, &[], &tiny_dims(), &spec).unwrap();
        assert_eq!(a.params, b.params);
    }
}
