//! Weak and strong view generation with shared geometry, plus
//! complementary feature-dropout masks and cutmix over strong views.
//!
//! All three views of a bundle share one flip decision, so pixel i
//! corresponds across views and pseudo-labels made on the weak view
//! can supervise the strong ones directly.

use crate::model::DropoutMask;
use crate::tensor::NdArray;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Perturbation magnitudes. The identity configuration turns every
/// knob off, which makes weak == strong == input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub gray_prob: f64,
    /// channel-drop probability p_d; 0 disables feature dropout
    pub dropout_prob: f64,
    pub cutmix: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            sigma_weak: 0.02,
            sigma_strong: 0.1,
            gain_lo: 0.7,
            gain_hi: 1.3,
            gray_prob: 0.2,
            dropout_prob: 0.5,
            cutmix: true,
        }
    }
}

impl AugmentConfig {
    /// Everything off: views equal the input, masks keep all channels.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            sigma_weak: 0.0,
            sigma_strong: 0.0,
            gain_lo: 1.0,
            gain_hi: 1.0,
            gray_prob: 0.0,
            dropout_prob: 0.0,
            cutmix: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("flip_prob", self.flip_prob),
            ("gray_prob", self.gray_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        if self.sigma_weak < 0.0 || self.sigma_strong < 0.0 {
            return Err(Error::InvalidArgument("negative noise sigma".into()));
        }
        if !(self.gain_lo > 0.0 && self.gain_hi >= self.gain_lo) {
            return Err(Error::InvalidArgument(format!(
                "gain range [{}, {}] invalid",
                self.gain_lo, self.gain_hi
            )));
        }
        Ok(())
    }
}

/// The shared geometric transform of one bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub hflip: bool,
}

impl Geometry {
    /// Apply the same transform to a per-pixel label map.
    pub fn apply_to_labels(&self, labels: &[usize], height: usize, width: usize) -> Vec<usize> {
        if !self.hflip {
            return labels.to_vec();
        }
        let mut out = vec![0; labels.len()];
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] = labels[y * width + (width - 1 - x)];
            }
        }
        out
    }
}

/// One weak view, two strong views derived from it, the shared
/// geometry, and complementary channel-dropout masks.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub weak: NdArray,
    pub strong1: NdArray,
    pub strong2: NdArray,
    pub geometry: Geometry,
    pub dropout1: DropoutMask,
    pub dropout2: DropoutMask,
}

fn hflip_image(img: &NdArray) -> NdArray {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + (w - 1 - x)) * c;
            let to = (y * w + x) * c;
            data[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    NdArray::new(img.shape().to_vec(), data).unwrap()
}

fn add_noise(img: &mut NdArray, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in img.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

fn strong_view(weak: &NdArray, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> NdArray {
    let c = *weak.shape().last().unwrap();
    let mut img = weak.clone();
    // per-channel gain jitter
    if cfg.gain_hi > cfg.gain_lo {
        let gains: Vec<f64> = (0..c)
            .map(|_| rng.random_range(cfg.gain_lo..cfg.gain_hi))
            .collect();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v *= gains[i % c];
        }
    }
    // grayscale analog: collapse channels to their mean
    if cfg.gray_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.gray_prob {
        let data = img.data_mut();
        for px in data.chunks_mut(c) {
            let mean = px.iter().sum::<f64>() / c as f64;
            px.iter_mut().for_each(|v| *v = mean);
        }
    }
    add_noise(&mut img, cfg.sigma_strong, rng);
    img
}

/// Generate a view bundle for one image. Deterministic in
/// (image, rng state); the two strong views and the masks consume the
/// stream in a fixed order.
pub fn make_views(
    image: &NdArray,
    cfg: &AugmentConfig,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBundle> {
    if image.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let hflip = cfg.flip_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.flip_prob;
    let mut weak = if hflip { hflip_image(image) } else { image.clone() };
    add_noise(&mut weak, cfg.sigma_weak, rng);

    let strong1 = strong_view(&weak, cfg, rng);
    let strong2 = strong_view(&weak, cfg, rng);

    // complementary channel masks; with p_d = 0 the second mask would
    // drop everything, so dropout is considered disabled then
    let keep1: Vec<bool> = (0..hidden)
        .map(|_| rng.random_range(0.0..1.0) >= cfg.dropout_prob)
        .collect();
    let keep2: Vec<bool> = keep1.iter().map(|k| !k).collect();
    Ok(ViewBundle {
        weak,
        strong1,
        strong2,
        geometry: Geometry { hflip },
        dropout1: DropoutMask {
            keep: keep1,
            keep_prob: (1.0 - cfg.dropout_prob).max(f64::MIN_POSITIVE),
        },
        dropout2: DropoutMask {
            keep: keep2,
            keep_prob: cfg.dropout_prob.max(f64::MIN_POSITIVE),
        },
    })
}

/// Strong views after splicing a rectangle of `b` into `a`, plus the
/// per-pixel provenance mask (`true` = pixel supplied by `b`). The
/// same rectangle applies to both strong streams so pseudo-labels can
/// be mixed identically.
#[derive(Debug, Clone)]
pub struct CutmixViews {
    pub strong1: NdArray,
    pub strong2: NdArray,
    pub from_b: Vec<bool>,
}

pub fn cutmix(a: &ViewBundle, b: &ViewBundle, rng: &mut ChaCha8Rng) -> Result<CutmixViews> {
    if a.strong1.shape() != b.strong1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cutmix {:?} vs {:?}",
            a.strong1.shape(),
            b.strong1.shape()
        )));
    }
    let (h, w, c) = (
        a.strong1.shape()[0],
        a.strong1.shape()[1],
        a.strong1.shape()[2],
    );
    // inclusive-exclusive bounds drawn uniformly; empty and full
    // rectangles are both possible
    let mut ys = [rng.random_range(0..=h), rng.random_range(0..=h)];
    ys.sort_unstable();
    let mut xs = [rng.random_range(0..=w), rng.random_range(0..=w)];
    xs.sort_unstable();
    cutmix_rect(a, b, ys[0]..ys[1], xs[0]..xs[1], h, w, c)
}

fn cutmix_rect(
    a: &ViewBundle,
    b: &ViewBundle,
    ys: std::ops::Range<usize>,
    xs: std::ops::Range<usize>,
    h: usize,
    w: usize,
    c: usize,
) -> Result<CutmixViews> {
    let mut from_b = vec![false; h * w];
    let mut strong1 = a.strong1.clone();
    let mut strong2 = a.strong2.clone();
    for y in ys {
        for x in xs.clone() {
            let p = y * w + x;
            from_b[p] = true;
            strong1.data_mut()[p * c..(p + 1) * c].copy_from_slice(&b.strong1.data()[p * c..(p + 1) * c]);
            strong2.data_mut()[p * c..(p + 1) * c].copy_from_slice(&b.strong2.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(CutmixViews {
        strong1,
        strong2,
        from_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn image(seed: u64, h: usize, w: usize, c: usize) -> NdArray {
        use rand::Rng;
        let mut rng = derive_rng(seed, &[3]);
        let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        NdArray::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn identity_config_reproduces_input() {
        let img = image(1, 4, 4, 3);
        let mut rng = derive_rng(0, &[1]);
        let b = make_views(&img, &AugmentConfig::identity(), 8, &mut rng).unwrap();
        assert_eq!(b.weak, img);
        assert_eq!(b.strong1, img);
        assert_eq!(b.strong2, img);
        assert!(!b.geometry.hflip);
        assert!(b.dropout1.keep.iter().all(|&k| k));
    }

    #[test]
    fn masks_are_exact_complements() {
        let img = image(2, 4, 4, 3);
        for seed in 0..20 {
            let mut rng = derive_rng(seed, &[2]);
            let b = make_views(&img, &AugmentConfig::default(), 16, &mut rng).unwrap();
            for (k1, k2) in b.dropout1.keep.iter().zip(&b.dropout2.keep) {
                assert_ne!(k1, k2);
            }
        }
    }

    #[test]
    fn bundles_deterministic_per_stream() {
        let img = image(3, 4, 4, 3);
        let cfg = AugmentConfig::default();
        let a = make_views(&img, &cfg, 8, &mut derive_rng(9, &[5])).unwrap();
        let b = make_views(&img, &cfg, 8, &mut derive_rng(9, &[5])).unwrap();
        assert_eq!(a.weak, b.weak);
        assert_eq!(a.strong1, b.strong1);
        assert_eq!(a.strong2, b.strong2);
        assert_eq!(a.dropout1.keep, b.dropout1.keep);
    }

    #[test]
    fn flip_geometry_applies_to_labels() {
        let g = Geometry { hflip: true };
        let labels = vec![0, 1, 2, 3, 4, 5];
        assert_eq!(g.apply_to_labels(&labels, 2, 3), vec![2, 1, 0, 5, 4, 3]);
        let id = Geometry { hflip: false };
        assert_eq!(id.apply_to_labels(&labels, 2, 3), labels);
    }

    #[test]
    fn flipped_views_share_geometry() {
        let img = image(4, 3, 5, 2);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = derive_rng(1, &[6]);
        let b = make_views(&img, &cfg, 4, &mut rng).unwrap();
        assert!(b.geometry.hflip);
        assert_eq!(b.weak, b.strong1);
        // flipping twice restores the input
        assert_eq!(hflip_image(&b.weak), img);
    }

    #[test]
    fn cutmix_full_and_empty_rectangles() {
        let cfg = AugmentConfig::identity();
        let a = make_views(&image(5, 4, 4, 2), &cfg, 4, &mut derive_rng(1, &[7])).unwrap();
        let b = make_views(&image(6, 4, 4, 2), &cfg, 4, &mut derive_rng(2, &[7])).unwrap();

        let full = cutmix_rect(&a, &b, 0..4, 0..4, 4, 4, 2).unwrap();
        assert_eq!(full.strong1, b.strong1);
        assert!(full.from_b.iter().all(|&x| x));

        let empty = cutmix_rect(&a, &b, 0..0, 0..0, 4, 4, 2).unwrap();
        assert_eq!(empty.strong1, a.strong1);
        assert!(empty.from_b.iter().all(|&x| !x));
    }

    #[test]
    fn cutmix_pixels_match_provenance() {
        let cfg = AugmentConfig::default();
        let a = make_views(&image(7, 6, 6, 3), &cfg, 4, &mut derive_rng(3, &[8])).unwrap();
        let b = make_views(&image(8, 6, 6, 3), &cfg, 4, &mut derive_rng(4, &[8])).unwrap();
        for seed in 0..10 {
            let mut rng = derive_rng(seed, &[9]);
            let m = cutmix(&a, &b, &mut rng).unwrap();
            for p in 0..36 {
                let src = if m.from_b[p] { &b } else { &a };
                assert_eq!(&m.strong1.data()[p * 3..p * 3 + 3], &src.strong1.data()[p * 3..p * 3 + 3]);
                assert_eq!(&m.strong2.data()[p * 3..p * 3 + 3], &src.strong2.data()[p * 3..p * 3 + 3]);
            }
        }
    }

    #[test]
    fn cutmix_shape_mismatch_errors() {
        let cfg = AugmentConfig::identity();
        let a = make_views(&image(1, 4, 4, 2), &cfg, 4, &mut derive_rng(1, &[10])).unwrap();
        let b = make_views(&image(2, 3, 4, 2), &cfg, 4, &mut derive_rng(2, &[10])).unwrap();
        let mut rng = derive_rng(3, &[10]);
        assert!(cutmix(&a, &b, &mut rng).is_err());
    }
}
