//! Procedural multi-domain segmentation data and the non-IID client
//! partitioners.
//!
//! Every image is a label map rendered through a domain: per-channel
//! gain and bias applied to a fixed per-class signature, plus Gaussian
//! noise. Domains model the shift between a labeled source, a set of
//! client conditions, and an unseen evaluation condition. Generation
//! is pure per seed, so benchmarks regenerate bit-identically.

use crate::checkpoint::NamedArrays;
use crate::rng::{derive_rng, stream};
use crate::tensor::NdArray;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::atomic::{AtomicBool, Ordering};

pub type DomainId = u32;

/// One rendering condition: x = gain * (signature + bias) + noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: DomainId,
    pub name: String,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

/// Multi-channel pixel grid with optional per-pixel class labels
/// (row-major, length height * width).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: NdArray,
    pub labels: Option<Vec<usize>>,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// One client's image collection plus the domain tags it draws from.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub images: Vec<LabeledImage>,
    pub domains: Vec<DomainId>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Fixed per-class channel signatures, shared by every domain.
/// Patterns are picked greedily from a deterministic candidate pool to
/// keep classes well separated, and each class gets a distinct mean
/// offset so that collapsing channels to their average (the grayscale
/// analog) still tells classes apart.
pub fn class_signatures(classes: usize, channels: usize) -> NdArray {
    let mut rng = derive_rng(0x51_6e_a7_u64, &[classes as u64, channels as u64]);
    let candidates: Vec<Vec<f64>> = (0..classes * 16)
        .map(|_| (0..channels).map(|_| rng.random_range(-0.8..0.8)).collect())
        .collect();
    let mut chosen: Vec<Vec<f64>> = vec![candidates[0].clone()];
    while chosen.len() < classes {
        let best = candidates
            .iter()
            .max_by(|a, b| {
                let da = min_dist(a, &chosen);
                let db = min_dist(b, &chosen);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        chosen.push(best.clone());
    }
    let mut data = Vec::with_capacity(classes * channels);
    for (c, pattern) in chosen.into_iter().enumerate() {
        let mu = if classes == 1 {
            0.0
        } else {
            -0.7 + 1.4 * c as f64 / (classes - 1) as f64
        };
        let mean: f64 = pattern.iter().sum::<f64>() / channels as f64;
        // recenter the pattern, then place the class at its own mean
        data.extend(pattern.iter().map(|v| v - mean + mu));
    }
    NdArray::new(vec![classes, channels], data).unwrap()
}

fn min_dist(v: &[f64], chosen: &[Vec<f64>]) -> f64 {
    chosen
        .iter()
        .map(|c| {
            v.iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Procedural ground-truth label map: Voronoi blobs (every class owns
/// at least one site) or stripes, chosen per seed.
pub fn gen_label_map(seed: u64, height: usize, width: usize, classes: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[stream::LABELS]);
    if classes <= 1 {
        return vec![0; height * width];
    }
    if rng.random_range(0.0..1.0) < 0.7 {
        // blobs: nearest-site assignment, one guaranteed site per class
        let extra = (height * width / 64).min(classes);
        let mut sites = Vec::with_capacity(classes + extra);
        for c in 0..classes {
            sites.push((
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                c,
            ));
        }
        for _ in 0..extra {
            let c = rng.random_range(0..classes);
            sites.push((
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                c,
            ));
        }
        let mut labels = vec![0; height * width];
        for y in 0..height {
            for x in 0..width {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &(sy, sx, _)) in sites.iter().enumerate() {
                    let d = (y as f64 + 0.5 - sy).powi(2) + (x as f64 + 0.5 - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                labels[y * width + x] = sites[best].2;
            }
        }
        labels
    } else {
        // stripes cycling through all classes
        let max_width = (height.min(width) / classes).max(2);
        let stripe = rng.random_range(2..=max_width.max(2));
        let orient = rng.random_range(0..3);
        let mut labels = vec![0; height * width];
        for y in 0..height {
            for x in 0..width {
                let coord = match orient {
                    0 => x,
                    1 => y,
                    _ => x + y,
                };
                labels[y * width + x] = (coord / stripe) % classes;
            }
        }
        labels
    }
}

/// Render a label map through a domain.
pub fn render(
    labels: &[usize],
    height: usize,
    width: usize,
    signatures: &NdArray,
    domain: &DomainSpec,
    seed: u64,
) -> Result<LabeledImage> {
    let channels = signatures.cols();
    if labels.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {}x{}",
            labels.len(),
            height,
            width
        )));
    }
    if domain.gain.len() != channels || domain.bias.len() != channels {
        return Err(Error::ShapeMismatch(format!(
            "domain `{}` has {} gain / {} bias entries for {} channels",
            domain.name,
            domain.gain.len(),
            domain.bias.len(),
            channels
        )));
    }
    let mut rng = derive_rng(seed, &[stream::RENDER, domain.id as u64]);
    let mut data = Vec::with_capacity(labels.len() * channels);
    for &l in labels {
        let sig = signatures.row(l);
        for j in 0..channels {
            let mut v = domain.gain[j] * (sig[j] + domain.bias[j]);
            if domain.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                v += domain.noise_sigma * z;
            }
            data.push(v);
        }
    }
    Ok(LabeledImage {
        pixels: NdArray::new(vec![height, width, channels], data)?,
        labels: Some(labels.to_vec()),
    })
}

/// A generated image still sitting in the partition pool.
#[derive(Debug, Clone)]
pub struct PoolImage {
    pub image: LabeledImage,
    pub domain: DomainId,
}

/// Single-domain clients with sizes drawn uniformly in
/// [min_imgs, max_imgs]; images are consumed from the pool, so client
/// datasets are pairwise disjoint.
pub fn partition_city_style(
    pool: &[PoolImage],
    n_clients: usize,
    min_imgs: usize,
    max_imgs: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if min_imgs == 0 || max_imgs < min_imgs {
        return Err(Error::InvalidArgument(format!(
            "bad size range [{min_imgs}, {max_imgs}]"
        )));
    }
    let mut rng = derive_rng(seed, &[stream::PARTITION, 1]);
    let mut by_domain = group_by_domain(pool);
    let mut tags: Vec<DomainId> = by_domain.iter().map(|(d, _)| *d).collect();
    tags.shuffle(&mut rng);

    let mut clients = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        let tag = tags[k % tags.len()];
        let size = rng.random_range(min_imgs..=max_imgs);
        let queue = &mut by_domain.iter_mut().find(|(d, _)| *d == tag).unwrap().1;
        if queue.len() < size {
            return Err(Error::InvalidArgument(format!(
                "pool too small: domain {tag} exhausted at client {k}"
            )));
        }
        let images: Vec<LabeledImage> = queue.drain(..size).collect();
        clients.push(ClientDataset {
            client_id: k,
            images,
            domains: vec![tag],
        });
    }
    Ok(clients)
}

/// Mixed-condition clients: each holds images from 2 to
/// `conditions_per_client_max` distinct domains, with a size drawn
/// uniformly in [min_imgs, max_imgs], disjoint across clients.
pub fn partition_weather_style(
    pool: &[PoolImage],
    n_clients: usize,
    conditions_per_client_max: usize,
    min_imgs: usize,
    max_imgs: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if min_imgs < 2 || max_imgs < min_imgs {
        return Err(Error::InvalidArgument(format!(
            "bad size range [{min_imgs}, {max_imgs}] (weather-style clients need >= 2 images)"
        )));
    }
    let mut rng = derive_rng(seed, &[stream::PARTITION, 2]);
    let mut by_domain = group_by_domain(pool);
    let tags: Vec<DomainId> = by_domain.iter().map(|(d, _)| *d).collect();
    if tags.len() < 2 {
        return Err(Error::InvalidArgument(
            "weather-style partition needs at least 2 domains".into(),
        ));
    }
    let max_mix = conditions_per_client_max.min(tags.len()).min(min_imgs);

    let mut clients = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        let size = rng.random_range(min_imgs..=max_imgs);
        let mix = rng.random_range(2..=max_mix.max(2));
        let mut picked = tags.clone();
        picked.shuffle(&mut rng);
        picked.truncate(mix);
        picked.sort_unstable();

        let base = size / mix;
        let rem = size % mix;
        let mut images = Vec::with_capacity(size);
        for (i, &tag) in picked.iter().enumerate() {
            let want = base + usize::from(i < rem);
            let queue = &mut by_domain.iter_mut().find(|(d, _)| *d == tag).unwrap().1;
            if queue.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "pool too small: domain {tag} exhausted at client {k}"
                )));
            }
            images.extend(queue.drain(..want));
        }
        clients.push(ClientDataset {
            client_id: k,
            images,
            domains: picked,
        });
    }
    Ok(clients)
}

fn group_by_domain(pool: &[PoolImage]) -> Vec<(DomainId, Vec<LabeledImage>)> {
    let mut out: Vec<(DomainId, Vec<LabeledImage>)> = Vec::new();
    for p in pool {
        match out.iter_mut().find(|(d, _)| *d == p.domain) {
            Some((_, v)) => v.push(p.image.clone()),
            None => out.push((p.domain, vec![p.image.clone()])),
        }
    }
    out
}

/// Labeled source images behind a sealable handle. After pretraining
/// the handle is sealed; any later access errors, which pins down the
/// source-free contract mechanically.
#[derive(Debug)]
pub struct SourceHandle {
    images: Vec<LabeledImage>,
    sealed: AtomicBool,
}

impl SourceHandle {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Self {
            images,
            sealed: AtomicBool::new(false),
        }
    }

    pub fn images(&self) -> Result<&[LabeledImage]> {
        if self.sealed.load(Ordering::SeqCst) {
            return Err(Error::SourceSealed);
        }
        Ok(&self.images)
    }

    pub fn seal(&self) {
        self.sealed.store(true, Ordering::SeqCst);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// crisp saturated source, city-flavored clients, unseen city eval
    Syn2Real,
    /// clean source, four adverse-condition client domains, unseen
    /// adverse eval domain
    Clear2Adverse,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Syn2Real => "syn2real",
            Scenario::Clear2Adverse => "clear2adverse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "syn2real" => Ok(Scenario::Syn2Real),
            "clear2adverse" => Ok(Scenario::Clear2Adverse),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (want syn2real | clear2adverse)"
            ))),
        }
    }
}

/// Sizes and shape of a generated benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub scenario: Scenario,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub source_images: usize,
    pub eval_images: usize,
    pub clients: usize,
    /// per-client size range used by both partition styles
    pub min_images: usize,
    pub max_images: usize,
}

impl BenchmarkSpec {
    pub fn defaults(scenario: Scenario, seed: u64) -> Self {
        let (clients, min_images, max_images) = match scenario {
            Scenario::Syn2Real => (144, 10, 45),
            Scenario::Clear2Adverse => (28, 4, 28),
        };
        Self {
            scenario,
            seed,
            height: 16,
            width: 16,
            channels: 6,
            classes: 5,
            source_images: 256,
            eval_images: 64,
            clients,
            min_images,
            max_images,
        }
    }
}

/// A fully generated benchmark: sealable source set, disjoint
/// non-IID clients, and an eval set from a domain no client holds.
#[derive(Debug)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub source: SourceHandle,
    pub clients: Vec<ClientDataset>,
    pub eval_images: Vec<LabeledImage>,
    pub domains: Vec<DomainSpec>,
    pub source_domain: DomainId,
    pub eval_domain: DomainId,
}

impl Benchmark {
    pub fn client_domain_ids(&self) -> Vec<DomainId> {
        let mut ids: Vec<DomainId> = self
            .clients
            .iter()
            .flat_map(|c| c.domains.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// All client images pooled into one dataset (client_id 0), for
    /// centralized self-training.
    pub fn pooled_clients(&self) -> ClientDataset {
        let mut images = Vec::new();
        let mut domains = Vec::new();
        for c in &self.clients {
            images.extend(c.images.iter().cloned());
            for &d in &c.domains {
                if !domains.contains(&d) {
                    domains.push(d);
                }
            }
        }
        domains.sort_unstable();
        ClientDataset {
            client_id: 0,
            images,
            domains,
        }
    }
}

/// Per-channel modulation so domain shifts are not scalar: each domain
/// perturbs its base gain/bias differently per channel, fixed by the
/// domain id alone.
fn domain_spec(
    id: DomainId,
    name: &str,
    channels: usize,
    base_gain: f64,
    base_bias: f64,
    sigma: f64,
) -> DomainSpec {
    let mut rng = derive_rng(0xd0_ae_11 + id as u64, &[channels as u64]);
    let gain = (0..channels)
        .map(|_| base_gain * (1.0 + 0.35 * rng.random_range(-1.0..1.0)))
        .collect();
    let bias = (0..channels)
        .map(|_| base_bias + 0.25 * rng.random_range(-1.0..1.0))
        .collect();
    DomainSpec {
        id,
        name: name.to_string(),
        gain,
        bias,
        noise_sigma: sigma,
    }
}

/// An unseen condition inside the span of the client conditions: a
/// fixed convex blend of their per-channel profiles with its own
/// noise level, so generalization means interpolating the client
/// meta-distribution, not extrapolating past it.
fn blended_domain(
    id: DomainId,
    name: &str,
    parents: &[(&DomainSpec, f64)],
    sigma: f64,
) -> DomainSpec {
    let channels = parents[0].0.gain.len();
    let mut gain = vec![0.0; channels];
    let mut bias = vec![0.0; channels];
    for (spec, w) in parents {
        for j in 0..channels {
            gain[j] += w * spec.gain[j];
            bias[j] += w * spec.bias[j];
        }
    }
    DomainSpec {
        id,
        name: name.to_string(),
        gain,
        bias,
        noise_sigma: sigma,
    }
}

/// The fixed domain table of a scenario: (all domains, source id,
/// client ids, eval id).
pub fn scenario_domains(
    scenario: Scenario,
    channels: usize,
) -> (Vec<DomainSpec>, DomainId, Vec<DomainId>, DomainId) {
    match scenario {
        Scenario::Clear2Adverse => {
            let fog = domain_spec(1, "fog", channels, 0.55, 0.30, 0.18);
            let night = domain_spec(2, "night", channels, 0.40, -0.22, 0.20);
            let rain = domain_spec(3, "rain", channels, 0.75, 0.12, 0.24);
            let snow = domain_spec(4, "snow", channels, 1.08, 0.28, 0.18);
            let storm = blended_domain(
                5,
                "storm",
                &[(&fog, 0.30), (&night, 0.55), (&rain, 0.15)],
                0.20,
            );
            let specs = vec![
                DomainSpec {
                    id: 0,
                    name: "clear".into(),
                    gain: vec![1.0; channels],
                    bias: vec![0.0; channels],
                    noise_sigma: 0.08,
                },
                fog,
                night,
                rain,
                snow,
                storm,
            ];
            (specs, 0, vec![1, 2, 3, 4], 5)
        }
        Scenario::Syn2Real => {
            let mut specs = vec![DomainSpec {
                id: 0,
                name: "synthetic".into(),
                gain: vec![1.3; channels],
                bias: vec![-0.2; channels],
                noise_sigma: 0.03,
            }];
            let mut client_ids = Vec::new();
            for (i, name) in ["city-a", "city-b", "city-c", "city-d", "city-e", "city-f"]
                .iter()
                .enumerate()
            {
                let id = (i + 1) as DomainId;
                let base_gain = 0.65 + 0.08 * i as f64;
                let base_bias = -0.12 + 0.05 * i as f64;
                specs.push(domain_spec(id, name, channels, base_gain, base_bias, 0.14));
                client_ids.push(id);
            }
            let eval = blended_domain(
                7,
                "city-eval",
                &[
                    (&specs[1], 0.25),
                    (&specs[2], 0.20),
                    (&specs[3], 0.15),
                    (&specs[4], 0.15),
                    (&specs[5], 0.15),
                    (&specs[6], 0.10),
                ],
                0.14,
            );
            specs.push(eval);
            (specs, 0, client_ids, 7)
        }
    }
}

fn gen_images(
    spec: &BenchmarkSpec,
    signatures: &NdArray,
    domain: &DomainSpec,
    count: usize,
    tag: u64,
) -> Result<Vec<LabeledImage>> {
    (0..count)
        .map(|i| {
            let s = spec
                .seed
                .wrapping_mul(0x9e37)
                .wrapping_add(tag.wrapping_mul(1_000_003))
                .wrapping_add(i as u64);
            let labels = gen_label_map(s, spec.height, spec.width, spec.classes);
            render(&labels, spec.height, spec.width, signatures, domain, s)
        })
        .collect()
}

/// Generate the full benchmark for a spec: labeled source set, client
/// partition, and held-out eval set from a domain no client holds.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let (domains, source_id, client_ids, eval_id) =
        scenario_domains(spec.scenario, spec.channels);
    let signatures = class_signatures(spec.classes, spec.channels);
    let by_id = |id: DomainId| domains.iter().find(|d| d.id == id).unwrap();

    let source = gen_images(spec, &signatures, by_id(source_id), spec.source_images, 0)?;
    let eval_images = gen_images(spec, &signatures, by_id(eval_id), spec.eval_images, 1)?;

    let mut pool = Vec::new();
    let per_domain = match spec.scenario {
        // worst-case demand: every client could land on one tag at the
        // top of the size range
        Scenario::Syn2Real => spec.clients.div_ceil(client_ids.len()) * spec.max_images,
        Scenario::Clear2Adverse => spec.clients * spec.max_images.div_ceil(2),
    };
    for (di, &id) in client_ids.iter().enumerate() {
        let images = gen_images(spec, &signatures, by_id(id), per_domain, 2 + di as u64)?;
        pool.extend(images.into_iter().map(|image| PoolImage { image, domain: id }));
    }
    let clients = match spec.scenario {
        Scenario::Syn2Real => partition_city_style(
            &pool,
            spec.clients,
            spec.min_images,
            spec.max_images,
            spec.seed,
        )?,
        Scenario::Clear2Adverse => partition_weather_style(
            &pool,
            spec.clients,
            4,
            spec.min_images,
            spec.max_images,
            spec.seed,
        )?,
    };

    Ok(Benchmark {
        spec: *spec,
        source: SourceHandle::new(source),
        clients,
        eval_images,
        domains,
        source_domain: source_id,
        eval_domain: eval_id,
    })
}

// --- dump / load ------------------------------------------------------

fn push_image(out: &mut NamedArrays, prefix: &str, img: &LabeledImage) {
    out.push(format!("{prefix}/pixels"), img.pixels.clone());
    if let Some(labels) = &img.labels {
        let data: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        out.push(
            format!("{prefix}/labels"),
            NdArray::new(vec![labels.len()], data).unwrap(),
        );
    }
}

fn take_image(arrays: &NamedArrays, prefix: &str) -> Result<LabeledImage> {
    let pixels = arrays
        .get(&format!("{prefix}/pixels"))
        .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/pixels")))?
        .clone();
    let labels = arrays
        .get(&format!("{prefix}/labels"))
        .map(|a| a.data().iter().map(|&v| v as usize).collect());
    Ok(LabeledImage { pixels, labels })
}

/// Serialize a benchmark as named arrays so a run can be replayed
/// without regeneration.
pub fn dump_benchmark(b: &Benchmark) -> Result<NamedArrays> {
    let mut out = NamedArrays::new();
    let s = &b.spec;
    let meta = vec![
        s.height as f64,
        s.width as f64,
        s.channels as f64,
        s.classes as f64,
        match s.scenario {
            Scenario::Syn2Real => 0.0,
            Scenario::Clear2Adverse => 1.0,
        },
        (s.seed & 0xffff_ffff) as f64,
        (s.seed >> 32) as f64,
        s.source_images as f64,
        s.eval_images as f64,
        s.clients as f64,
        s.min_images as f64,
        s.max_images as f64,
        b.source_domain as f64,
        b.eval_domain as f64,
    ];
    out.push("meta".to_string(), NdArray::new(vec![meta.len()], meta)?);
    for d in &b.domains {
        let mut row = vec![d.noise_sigma];
        row.extend(&d.gain);
        row.extend(&d.bias);
        out.push(
            format!("domain/{:02}/{}", d.id, d.name),
            NdArray::new(vec![row.len()], row)?,
        );
    }
    for (i, img) in b.source.images()?.iter().enumerate() {
        push_image(&mut out, &format!("source/{i:04}"), img);
    }
    for c in &b.clients {
        let tags: Vec<f64> = c.domains.iter().map(|&d| d as f64).collect();
        out.push(
            format!("client/{:04}/domains", c.client_id),
            NdArray::new(vec![tags.len()], tags)?,
        );
        for (i, img) in c.images.iter().enumerate() {
            push_image(&mut out, &format!("client/{:04}/img/{i:04}", c.client_id), img);
        }
    }
    for (i, img) in b.eval_images.iter().enumerate() {
        push_image(&mut out, &format!("eval/{i:04}"), img);
    }
    Ok(out)
}

/// Rebuild a benchmark from a dump produced by [`dump_benchmark`].
pub fn load_benchmark(arrays: &NamedArrays) -> Result<Benchmark> {
    let meta = arrays
        .get("meta")
        .ok_or_else(|| Error::Checkpoint("missing meta".into()))?
        .data();
    if meta.len() != 14 {
        return Err(Error::Checkpoint(format!(
            "meta has {} entries, want 14",
            meta.len()
        )));
    }
    let scenario = if meta[4] == 0.0 {
        Scenario::Syn2Real
    } else {
        Scenario::Clear2Adverse
    };
    let spec = BenchmarkSpec {
        scenario,
        seed: (meta[5] as u64) | ((meta[6] as u64) << 32),
        height: meta[0] as usize,
        width: meta[1] as usize,
        channels: meta[2] as usize,
        classes: meta[3] as usize,
        source_images: meta[7] as usize,
        eval_images: meta[8] as usize,
        clients: meta[9] as usize,
        min_images: meta[10] as usize,
        max_images: meta[11] as usize,
    };
    let channels = spec.channels;

    let mut domains = Vec::new();
    for (name, arr) in arrays.iter() {
        if let Some(rest) = name.strip_prefix("domain/") {
            let (id_str, dname) = rest
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad domain entry `{name}`")))?;
            let id: DomainId = id_str
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad domain id `{id_str}`")))?;
            let row = arr.data();
            if row.len() != 1 + 2 * channels {
                return Err(Error::Checkpoint(format!("domain `{name}` wrong length")));
            }
            domains.push(DomainSpec {
                id,
                name: dname.to_string(),
                noise_sigma: row[0],
                gain: row[1..1 + channels].to_vec(),
                bias: row[1 + channels..].to_vec(),
            });
        }
    }
    domains.sort_by_key(|d| d.id);

    let source: Vec<LabeledImage> = (0..spec.source_images)
        .map(|i| take_image(arrays, &format!("source/{i:04}")))
        .collect::<Result<_>>()?;
    let eval_images: Vec<LabeledImage> = (0..spec.eval_images)
        .map(|i| take_image(arrays, &format!("eval/{i:04}")))
        .collect::<Result<_>>()?;

    let mut clients = Vec::new();
    for k in 0..spec.clients {
        let tags = arrays
            .get(&format!("client/{k:04}/domains"))
            .ok_or_else(|| Error::Checkpoint(format!("missing client {k} domains")))?;
        let domains_k: Vec<DomainId> = tags.data().iter().map(|&v| v as DomainId).collect();
        let mut images = Vec::new();
        let mut i = 0;
        while let Ok(img) = take_image(arrays, &format!("client/{k:04}/img/{i:04}")) {
            images.push(img);
            i += 1;
        }
        if images.is_empty() {
            return Err(Error::Checkpoint(format!("client {k} has no images")));
        }
        clients.push(ClientDataset {
            client_id: k,
            images,
            domains: domains_k,
        });
    }

    Ok(Benchmark {
        spec,
        source: SourceHandle::new(source),
        clients,
        eval_images,
        domains,
        source_domain: meta[12] as DomainId,
        eval_domain: meta[13] as DomainId,
    })
}
