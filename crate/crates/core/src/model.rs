//! Per-pixel segmentation model: a two-layer MLP vision pathway feeding
//! a cosine-similarity head against frozen class embeddings, with
//! hand-derived gradients and student/teacher parameter management.
//!
//! Per pixel i with channels x_i:
//!   a_i  = relu(W1 x_i + b1)            (optionally channel-dropped)
//!   v_i  = W2 a_i + b2
//!   logit[i,c] = scale * <unit(v_i), unit(embed_c)>
//!
//! The class embeddings stand in for a frozen text encoder: fixed unit
//! vectors per class id, never updated by training. The backward pass
//! is certified against central finite differences (see `gradcheck`).

use crate::rng::{derive_rng, stream};
use crate::tensor::{l2_normalize, softmax_rows, NdArray, NORM_EPS};
use crate::{Error, Result};
use rand::Rng;

/// Layer widths of the pathway. Small by default; config-exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_channels: usize,
    pub hidden: usize,
    pub feature: usize,
    pub classes: usize,
}

/// All model parameters. Trainable: w1, b1, w2, b2, scale.
/// Frozen: class_embed (unit rows, fixed at construction).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// hidden x input_channels
    pub w1: NdArray,
    /// hidden
    pub b1: NdArray,
    /// feature x hidden
    pub w2: NdArray,
    /// feature
    pub b2: NdArray,
    /// classes x feature, frozen
    pub class_embed: NdArray,
    /// logit temperature
    pub scale: f64,
}

impl ParamSet {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_channels: self.w1.cols(),
            hidden: self.w1.rows(),
            feature: self.w2.rows(),
            classes: self.class_embed.rows(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        self.w1.check_finite("w1")?;
        self.b1.check_finite("b1")?;
        self.w2.check_finite("w2")?;
        self.b2.check_finite("b2")?;
        self.class_embed.check_finite("class_embed")?;
        if !self.scale.is_finite() {
            return Err(Error::NonFinite("scale".into()));
        }
        Ok(())
    }
}

/// Gradients shaped like a ParamSet. The frozen class embeddings always
/// carry zeros.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w1: NdArray,
    pub b1: NdArray,
    pub w2: NdArray,
    pub b2: NdArray,
    pub class_embed: NdArray,
    pub scale: f64,
}

impl ParamGrads {
    pub fn zeros_like(p: &ParamSet) -> Self {
        Self {
            w1: NdArray::zeros(p.w1.shape().to_vec()),
            b1: NdArray::zeros(p.b1.shape().to_vec()),
            w2: NdArray::zeros(p.w2.shape().to_vec()),
            b2: NdArray::zeros(p.b2.shape().to_vec()),
            class_embed: NdArray::zeros(p.class_embed.shape().to_vec()),
            scale: 0.0,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        self.w1.check_finite("grad w1")?;
        self.b1.check_finite("grad b1")?;
        self.w2.check_finite("grad w2")?;
        self.b2.check_finite("grad b2")?;
        if !self.scale.is_finite() {
            return Err(Error::NonFinite("grad scale".into()));
        }
        Ok(())
    }
}

/// Channel mask for feature-level dropout, with the keep probability
/// used for inverted scaling (divide at train time, nothing at eval).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub keep_prob: f64,
}

/// Teacher parameters tracked as an exponential moving average of a
/// student, with fixed momentum.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub params: ParamSet,
    pub momentum: f64,
}

impl TeacherState {
    pub fn new(params: ParamSet, momentum: f64) -> Self {
        Self { params, momentum }
    }
}

/// Deterministic unit embedding for one class id. Independent of the
/// run seed so the "text" side is identical across experiments.
fn class_embedding(class: usize, feature: usize) -> Vec<f64> {
    let mut rng = derive_rng(0x7fe2_a1c4_90b3_11d7, &[class as u64, feature as u64]);
    loop {
        let v: Vec<f64> = (0..feature).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.1 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Seeded initialization: trainable arrays uniform in (-r, r) with
/// r = sqrt(6 / (fan_in + fan_out)); embeddings fixed per class id;
/// scale starts at 10 so cosine logits separate classes quickly.
pub fn init_params(seed: u64, dims: &ModelDims) -> ParamSet {
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let mut uniform = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..rows * cols).map(|_| rng.random_range(-r..r)).collect()
    };
    let w1 = uniform(dims.hidden, dims.input_channels, dims.input_channels, dims.hidden);
    let b1 = uniform(dims.hidden, 1, dims.input_channels, dims.hidden);
    let w2 = uniform(dims.feature, dims.hidden, dims.hidden, dims.feature);
    let b2 = uniform(dims.feature, 1, dims.hidden, dims.feature);
    let mut embed = Vec::with_capacity(dims.classes * dims.feature);
    for c in 0..dims.classes {
        embed.extend(class_embedding(c, dims.feature));
    }
    ParamSet {
        w1: NdArray::new(vec![dims.hidden, dims.input_channels], w1).unwrap(),
        b1: NdArray::new(vec![dims.hidden], b1).unwrap(),
        w2: NdArray::new(vec![dims.feature, dims.hidden], w2).unwrap(),
        b2: NdArray::new(vec![dims.feature], b2).unwrap(),
        class_embed: NdArray::new(vec![dims.classes, dims.feature], embed).unwrap(),
        scale: 10.0,
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
pub(crate) struct ForwardCache {
    pixels: usize,
    /// pre-activation W1 x + b1, pixels x hidden
    pre_act: Vec<f64>,
    /// post relu + dropout, pixels x hidden
    act: Vec<f64>,
    /// |v|_2 per pixel
    feat_norm: Vec<f64>,
    /// unit feature, pixels x feature
    feat_unit: Vec<f64>,
    /// unit class embeddings, classes x feature
    embed_unit: Vec<f64>,
    /// cosine per pixel per class (logits / scale)
    cos: Vec<f64>,
    dropout: Option<DropoutMask>,
    /// flattened input pixels, pixels x channels
    input: Vec<f64>,
}

fn check_image(dims: &ModelDims, image: &NdArray) -> Result<usize> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != dims.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} does not end in {} channels",
            shape, dims.input_channels
        )));
    }
    Ok(shape[0] * shape[1])
}

pub(crate) fn forward_cached(
    params: &ParamSet,
    image: &NdArray,
    dropout: Option<&DropoutMask>,
) -> Result<(NdArray, ForwardCache)> {
    let dims = params.dims();
    let pixels = check_image(&dims, image)?;
    if let Some(m) = dropout {
        if m.keep.len() != dims.hidden {
            return Err(Error::ShapeMismatch(format!(
                "dropout mask length {} != hidden {}",
                m.keep.len(),
                dims.hidden
            )));
        }
        if !(m.keep_prob > 0.0 && m.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep_prob {} outside (0, 1]",
                m.keep_prob
            )));
        }
    }
    let (h, d, c_in, classes) = (dims.hidden, dims.feature, dims.input_channels, dims.classes);

    let mut embed_unit = Vec::with_capacity(classes * d);
    for c in 0..classes {
        embed_unit.extend(l2_normalize(params.class_embed.row(c)));
    }

    let input = image.data().to_vec();
    let mut pre_act = vec![0.0; pixels * h];
    let mut act = vec![0.0; pixels * h];
    let mut feat = vec![0.0; pixels * d];
    let mut feat_norm = vec![0.0; pixels];
    let mut feat_unit = vec![0.0; pixels * d];
    let mut cos = vec![0.0; pixels * classes];
    let mut logits = NdArray::zeros(vec![pixels, classes]);

    let w1 = params.w1.data();
    let b1 = params.b1.data();
    let w2 = params.w2.data();
    let b2 = params.b2.data();

    for i in 0..pixels {
        let x = &input[i * c_in..(i + 1) * c_in];
        for j in 0..h {
            let mut s = b1[j];
            let wrow = &w1[j * c_in..(j + 1) * c_in];
            for (wv, xv) in wrow.iter().zip(x) {
                s += wv * xv;
            }
            pre_act[i * h + j] = s;
            let mut a = if s > 0.0 { s } else { 0.0 };
            if let Some(m) = dropout {
                a = if m.keep[j] { a / m.keep_prob } else { 0.0 };
            }
            act[i * h + j] = a;
        }
        let arow = &act[i * h..(i + 1) * h];
        for k in 0..d {
            let mut s = b2[k];
            let wrow = &w2[k * h..(k + 1) * h];
            for (wv, av) in wrow.iter().zip(arow) {
                s += wv * av;
            }
            feat[i * d + k] = s;
        }
        let vrow = &feat[i * d..(i + 1) * d];
        let norm = vrow.iter().map(|x| x * x).sum::<f64>().sqrt();
        feat_norm[i] = norm;
        let denom = norm.max(NORM_EPS);
        for k in 0..d {
            feat_unit[i * d + k] = vrow[k] / denom;
        }
        let urow = &feat_unit[i * d..(i + 1) * d];
        for c in 0..classes {
            let erow = &embed_unit[c * d..(c + 1) * d];
            let mut dot = 0.0;
            for (uv, ev) in urow.iter().zip(erow) {
                dot += uv * ev;
            }
            cos[i * classes + c] = dot;
            logits.data_mut()[i * classes + c] = params.scale * dot;
        }
    }
    logits.check_finite("forward logits")?;
    Ok((
        logits,
        ForwardCache {
            pixels,
            pre_act,
            act,
            feat_norm,
            feat_unit,
            embed_unit,
            cos,
            dropout: dropout.cloned(),
            input,
        },
    ))
}

/// Per-pixel logits for an H x W x channels image. Pure in
/// (params, image, mask); safe to call concurrently.
pub fn forward(
    params: &ParamSet,
    image: &NdArray,
    dropout: Option<&DropoutMask>,
) -> Result<NdArray> {
    forward_cached(params, image, dropout).map(|(logits, _)| logits)
}

/// Softmax class posteriors for an image.
pub fn forward_probs(
    params: &ParamSet,
    image: &NdArray,
    dropout: Option<&DropoutMask>,
) -> Result<NdArray> {
    softmax_rows(&forward(params, image, dropout)?)
}

/// Backprop a logit gradient through one cached pass, accumulating
/// into `grads`. The frozen embeddings receive nothing.
fn backward_into(
    params: &ParamSet,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut ParamGrads,
) {
    let dims = params.dims();
    let (h, d, c_in, classes) = (dims.hidden, dims.feature, dims.input_channels, dims.classes);
    let w2 = params.w2.data();

    let mut dv = vec![0.0; d];
    let mut da = vec![0.0; h];

    for i in 0..cache.pixels {
        let dlrow = &dlogits[i * classes..(i + 1) * classes];
        if dlrow.iter().all(|&g| g == 0.0) {
            continue;
        }
        let urow = &cache.feat_unit[i * d..(i + 1) * d];
        let cosrow = &cache.cos[i * classes..(i + 1) * classes];

        // scale and unit-feature gradients
        let mut duhat = vec![0.0; d];
        for c in 0..classes {
            let g = dlrow[c];
            if g == 0.0 {
                continue;
            }
            grads.scale += g * cosrow[c];
            let erow = &cache.embed_unit[c * d..(c + 1) * d];
            for k in 0..d {
                duhat[k] += params.scale * g * erow[k];
            }
        }

        // through v / max(|v|, eps)
        let norm = cache.feat_norm[i];
        if norm > NORM_EPS {
            let mut proj = 0.0;
            for k in 0..d {
                proj += duhat[k] * urow[k];
            }
            for k in 0..d {
                dv[k] = (duhat[k] - proj * urow[k]) / norm;
            }
        } else {
            for k in 0..d {
                dv[k] = duhat[k] / NORM_EPS;
            }
        }

        // v = W2 a + b2
        let arow = &cache.act[i * h..(i + 1) * h];
        for j in 0..h {
            da[j] = 0.0;
        }
        for k in 0..d {
            let g = dv[k];
            if g == 0.0 {
                continue;
            }
            grads.b2.data_mut()[k] += g;
            let gw2row = &mut grads.w2.data_mut()[k * h..(k + 1) * h];
            let w2row = &w2[k * h..(k + 1) * h];
            for j in 0..h {
                gw2row[j] += g * arow[j];
                da[j] += g * w2row[j];
            }
        }

        // dropout scaling, then relu gate
        if let Some(m) = &cache.dropout {
            for j in 0..h {
                da[j] = if m.keep[j] { da[j] / m.keep_prob } else { 0.0 };
            }
        }
        let xrow = &cache.input[i * c_in..(i + 1) * c_in];
        for j in 0..h {
            if cache.pre_act[i * h + j] <= 0.0 {
                continue;
            }
            let g = da[j];
            if g == 0.0 {
                continue;
            }
            grads.b1.data_mut()[j] += g;
            let gw1row = &mut grads.w1.data_mut()[j * c_in..(j + 1) * c_in];
            for (gw, xv) in gw1row.iter_mut().zip(xrow) {
                *gw += g * xv;
            }
        }
    }
}

/// Identifier of one forward pass recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassId(usize);

/// Records forward passes and cross-entropy terms for one batch
/// closure, then backprops everything in [`GradTape::finish`].
///
/// Loss reductions register per-pixel terms via
/// [`crate::loss::CeTerms`]; the tape turns probabilities and terms
/// into logit gradients analytically (softmax + log fold into
/// p - onehot), so only the vision pathway needs a hand-derived chain.
pub struct GradTape<'a> {
    params: &'a ParamSet,
    passes: Vec<TapePass>,
    total: f64,
}

struct TapePass {
    cache: ForwardCache,
    probs: NdArray,
    dlogits: Vec<f64>,
}

impl<'a> GradTape<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            passes: Vec::new(),
            total: 0.0,
        }
    }

    /// Run and record a forward pass; returns a handle for attaching
    /// loss terms.
    pub fn forward(&mut self, image: &NdArray, dropout: Option<&DropoutMask>) -> Result<PassId> {
        let (logits, cache) = forward_cached(self.params, image, dropout)?;
        let probs = softmax_rows(&logits)?;
        let n = probs.len();
        self.passes.push(TapePass {
            cache,
            probs,
            dlogits: vec![0.0; n],
        });
        Ok(PassId(self.passes.len() - 1))
    }

    /// Softmax probabilities of a recorded pass.
    pub fn probs(&self, id: PassId) -> &NdArray {
        &self.passes[id.0].probs
    }

    /// Attach weighted cross-entropy terms to a pass. Returns the
    /// weighted scalar contribution, which is also added to the
    /// running total.
    pub fn add_terms(&mut self, id: PassId, terms: &crate::loss::CeTerms, weight: f64) -> f64 {
        let pass = &mut self.passes[id.0];
        let classes = pass.probs.cols();
        for t in &terms.terms {
            if t.clamped {
                continue;
            }
            let prow = pass.probs.row(t.pixel);
            let drow = &mut pass.dlogits[t.pixel * classes..(t.pixel + 1) * classes];
            let coeff = weight * t.coeff;
            for c in 0..classes {
                let indicator = if c == t.class { 1.0 } else { 0.0 };
                drow[c] += coeff * (prow[c] - indicator);
            }
        }
        let contribution = weight * terms.value;
        self.total += contribution;
        contribution
    }

    /// Accumulated weighted loss so far.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Backprop every pass; errors with `Diverged` if the loss or any
    /// gradient came out non-finite.
    pub fn finish(self) -> Result<(f64, ParamGrads)> {
        if !self.total.is_finite() {
            return Err(Error::Diverged);
        }
        let mut grads = ParamGrads::zeros_like(self.params);
        for pass in &self.passes {
            backward_into(self.params, &pass.cache, &pass.dlogits, &mut grads);
        }
        if grads.check_finite().is_err() {
            return Err(Error::Diverged);
        }
        Ok((self.total, grads))
    }
}

/// Evaluate a batch loss built from forward passes and loss-module
/// reductions, returning the scalar and its parameter gradient.
pub fn loss_and_grad<F>(params: &ParamSet, build: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut GradTape) -> Result<()>,
{
    let mut tape = GradTape::new(params);
    build(&mut tape)?;
    tape.finish()
}

/// One SGD step: trainable arrays move against the gradient, frozen
/// embeddings stay put.
pub fn sgd_step(params: &ParamSet, grads: &ParamGrads, lr: f64) -> ParamSet {
    let step = |p: &NdArray, g: &NdArray| {
        let data: Vec<f64> = p
            .data()
            .iter()
            .zip(g.data())
            .map(|(pv, gv)| pv - lr * gv)
            .collect();
        NdArray::new(p.shape().to_vec(), data).expect("sgd_step produced non-finite values")
    };
    ParamSet {
        w1: step(&params.w1, &grads.w1),
        b1: step(&params.b1, &grads.b1),
        w2: step(&params.w2, &grads.w2),
        b2: step(&params.b2, &grads.b2),
        class_embed: params.class_embed.clone(),
        scale: params.scale - lr * grads.scale,
    }
}

/// teacher <- gamma * teacher + (1 - gamma) * student, elementwise over
/// every array including the (identical) frozen embeddings.
pub fn ema_update(teacher: &TeacherState, student: &ParamSet) -> TeacherState {
    let g = teacher.momentum;
    let blend = |t: &NdArray, s: &NdArray| {
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(tv, sv)| g * tv + (1.0 - g) * sv)
            .collect();
        NdArray::new(t.shape().to_vec(), data).expect("ema_update produced non-finite values")
    };
    TeacherState {
        params: ParamSet {
            w1: blend(&teacher.params.w1, &student.w1),
            b1: blend(&teacher.params.b1, &student.b1),
            w2: blend(&teacher.params.w2, &student.w2),
            b2: blend(&teacher.params.b2, &student.b2),
            class_embed: blend(&teacher.params.class_embed, &student.class_embed),
            scale: g * teacher.params.scale + (1.0 - g) * student.scale,
        },
        momentum: g,
    }
}
