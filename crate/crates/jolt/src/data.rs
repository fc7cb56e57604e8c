//! Synthetic dataset, few-shot episodes, and augmentation.
//!
//! Classes are colored gratings: each class owns a hue and a stripe
//! orientation, and each sample jitters hue, orientation, and stripe phase
//! around those. The stripe phase doubles as the sample's style: its decile
//! selects one of [`STYLE_MODES`] fixed appearance modes (saturation,
//! brightness, stripe contrast), so every class spans ten visibly distinct
//! sub-populations while the class identity (hue angle, orientation,
//! stripe frequency) stays mode-invariant. Small support sets usually miss
//! a couple of modes per class; the generation cache is built mode-balanced,
//! which is precisely the coverage a support set lacks.
//!
//! At zero noise the classes are linearly separable from raw pixels; the
//! `noise` (per-pixel gaussian) and `color_jitter` (per-sample hue drift)
//! dials move the task from trivial to genuinely confusable, which is what
//! the direction-check harness tunes against.
//!
//! Three disjoint splits come from disjoint seed streams: `train` (support
//! sets are sampled from it), `test` (fixed per dataset so every ablation
//! cell scores on identical data), and `pool` (only the generative stack
//! trains on it, keeping few-shot support sets out of the generator).

use crate::diffusion::GenerationCache;
use crate::seeds::{Fnv, SeedSplitter};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Image side; latents are this over 8.
pub const IMAGE_HW: usize = 32;
/// Shot counts the episode sampler accepts without an override flag.
pub const STANDARD_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Distinct appearance modes per class; generation conditions on the same
/// quantization, one token per (class, mode) pair.
pub const STYLE_MODES: usize = 10;

/// Per-mode appearance: (saturation, value, shade base, shade amplitude).
/// Deliberately scrambled so adjacent style deciles are not adjacent in
/// appearance; a support set that misses a mode has no close stand-in.
const MODE_LOOK: [(f64, f64, f64, f64); STYLE_MODES] = [
    (0.95, 0.95, 0.55, 0.45),
    (0.50, 0.60, 0.85, 0.15),
    (0.95, 0.60, 0.55, 0.45),
    (0.50, 0.95, 0.55, 0.45),
    (0.72, 0.80, 0.35, 0.65),
    (0.95, 0.95, 0.85, 0.15),
    (0.50, 0.60, 0.55, 0.45),
    (0.95, 0.60, 0.85, 0.15),
    (0.72, 0.45, 0.55, 0.45),
    (0.50, 0.95, 0.85, 0.15),
];

/// Style fraction -> appearance mode (and generation variant) index.
pub fn style_mode(style: f64) -> usize {
    ((style * STYLE_MODES as f64) as usize).min(STYLE_MODES - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Generator-only split size; the autoencoder and denoiser never see
    /// `train` or `test` images.
    pub pool_per_class: usize,
    /// Per-pixel gaussian noise sigma.
    pub noise: f64,
    /// Per-sample hue drift sigma, in hue-wheel units (class spacing is
    /// 1/n_classes, so values near that spacing make classes collide).
    pub color_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            n_classes: 10,
            train_per_class: 32,
            test_per_class: 20,
            pool_per_class: 64,
            noise: 0.1,
            color_jitter: 0.02,
        }
    }
}

/// One split: images with aligned labels and a per-sample style scalar
/// (stripe phase as a fraction of a full cycle), class-major order.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub styles: Vec<f64>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    fn hash_into(&self, h: &mut Fnv) {
        h.write_u64(self.len() as u64);
        for (img, (&label, &style)) in self.images.iter().zip(self.labels.iter().zip(&self.styles))
        {
            h.write_u64(label as u64);
            h.write_f64(style);
            for &v in img.data() {
                h.write_f64(v);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub cfg: DataConfig,
    pub seed: u64,
    pub train: Split,
    pub test: Split,
    pub pool: Split,
}

impl SyntheticDataset {
    /// Stable hash of every pixel, label, and style in all three splits.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        self.train.hash_into(&mut h);
        self.test.hash_into(&mut h);
        self.pool.hash_into(&mut h);
        h.finish()
    }

    /// Hash of the test split alone; ablation grids record it so "every
    /// cell scored on the same data" is checkable, not just intended.
    pub fn test_split_hash(&self) -> u64 {
        let mut h = Fnv::new();
        self.test.hash_into(&mut h);
        h.finish()
    }
}

/// On-disk record of how a dataset was built. The dataset itself is cheap
/// to regenerate, so this (plus the content hash to detect drift) is the
/// persisted artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cfg: DataConfig,
    pub seed: u64,
    pub content_hash: u64,
}

pub fn make_synthetic_dataset(cfg: &DataConfig, seed: u64) -> Result<SyntheticDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 classes, got {}",
            cfg.n_classes
        )));
    }
    if cfg.noise < 0.0 || cfg.color_jitter < 0.0 {
        return Err(Error::InvalidArg(
            "noise and color_jitter must be non-negative".into(),
        ));
    }
    let seeds = SeedSplitter::new(seed).scope("dataset");
    Ok(SyntheticDataset {
        cfg: cfg.clone(),
        seed,
        train: render_split(cfg, cfg.train_per_class, &seeds.scope("train")),
        test: render_split(cfg, cfg.test_per_class, &seeds.scope("test")),
        pool: render_split(cfg, cfg.pool_per_class, &seeds.scope("pool")),
    })
}

fn render_split(cfg: &DataConfig, per_class: usize, seeds: &SeedSplitter) -> Split {
    let n = cfg.n_classes * per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut styles = Vec::with_capacity(n);
    for class in 0..cfg.n_classes {
        let name = format!("class{class}");
        for i in 0..per_class {
            let mut rng = seeds.rng_at(&name, i as u64);
            let (img, style) = render_sample(cfg, class, &mut rng);
            images.push(img);
            labels.push(class);
            styles.push(style);
        }
    }
    Split { images, labels, styles }
}

/// Draws one sample: class hue + jitter, class orientation + jitter, free
/// stripe phase, then per-pixel noise. The phase decile picks the
/// appearance mode; the returned style fraction is that same phase, so
/// quantizing it recovers the mode.
fn render_sample(cfg: &DataConfig, class: usize, rng: &mut ChaCha8Rng) -> (Tensor, f64) {
    let n = cfg.n_classes as f64;
    let hue_jitter = if cfg.color_jitter > 0.0 {
        rand_distr::Normal::new(0.0, cfg.color_jitter)
            .unwrap()
            .sample(rng)
    } else {
        0.0
    };
    let hue = (class as f64 / n + hue_jitter).rem_euclid(1.0);
    let theta = std::f64::consts::PI * class as f64 / n
        + rng.gen_range(-1.0..1.0) * 0.08 * std::f64::consts::PI;
    let freq = 2.0 + (class % 3) as f64;
    let phase_frac: f64 = rng.gen_range(0.0..1.0);
    let phase = phase_frac * std::f64::consts::TAU;
    let (sat, val, shade_base, shade_amp) = MODE_LOOK[style_mode(phase_frac)];
    let rgb = hsv_to_rgb(hue, sat, val);
    let (ct, st) = (theta.cos(), theta.sin());

    let hw = IMAGE_HW;
    let mut data = vec![0.0; 3 * hw * hw];
    let noise_draw = |rng: &mut ChaCha8Rng| {
        if cfg.noise > 0.0 {
            rand_distr::Normal::new(0.0, cfg.noise).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    for y in 0..hw {
        for x in 0..hw {
            let proj = (x as f64 * ct + y as f64 * st) / hw as f64;
            let g = 0.5 * (1.0 + (std::f64::consts::TAU * freq * proj + phase).sin());
            let shade = shade_base + shade_amp * g;
            for c in 0..3 {
                let v = rgb[c] * shade + noise_draw(rng);
                data[c * hw * hw + y * hw + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    (
        Tensor::from_vec(&[3, hw, hw], data).unwrap(),
        phase_frac,
    )
}

/// Standard HSV to RGB, h/s/v all in [0,1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

// ── episodes ────────────────────────────────────────────────────────────

/// One few-shot task: a support set of real images plus an equal-sized set
/// of generated image/latent pairs. The generated count always equals the
/// support count per class (single `shots` field, so the invariant cannot
/// be violated by construction), and `latents[i]` came from the same
/// generation call as `gen_images[i]`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub shots: usize,
    pub n_classes: usize,
    pub support_images: Vec<Tensor>,
    pub support_labels: Vec<usize>,
    pub gen_images: Vec<Tensor>,
    pub gen_labels: Vec<usize>,
    pub latents: Vec<Tensor>,
}

impl Episode {
    /// Exact per-class counts in both collections; used by tests and
    /// asserted cheap enough to run in release.
    pub fn check_balance(&self) -> bool {
        let count = |labels: &[usize]| {
            let mut c = vec![0usize; self.n_classes];
            for &l in labels {
                if l >= self.n_classes {
                    return None;
                }
                c[l] += 1;
            }
            Some(c)
        };
        matches!(
            (count(&self.support_labels), count(&self.gen_labels)),
            (Some(a), Some(b))
                if a.iter().all(|&k| k == self.shots) && b.iter().all(|&k| k == self.shots)
        ) && self.gen_images.len() == self.latents.len()
    }
}

/// Samples an N-way K-shot episode: per class, `shots` support images from
/// the train split and `shots` cached generation records, both without
/// replacement. Non-standard shot counts need `allow_any_shots`.
pub fn sample_episode(
    ds: &SyntheticDataset,
    cache: &GenerationCache,
    shots: usize,
    seeds: &SeedSplitter,
    allow_any_shots: bool,
) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::InvalidArg("shots must be positive".into()));
    }
    if !allow_any_shots && !STANDARD_SHOTS.contains(&shots) {
        return Err(Error::NonStandardShots { shots });
    }
    if cache.n_classes() < ds.cfg.n_classes {
        return Err(Error::InvalidArg(format!(
            "cache holds {} classes, dataset has {}",
            cache.n_classes(),
            ds.cfg.n_classes
        )));
    }
    let n = ds.cfg.n_classes;
    let mut ep = Episode {
        shots,
        n_classes: n,
        support_images: Vec::with_capacity(n * shots),
        support_labels: Vec::with_capacity(n * shots),
        gen_images: Vec::with_capacity(n * shots),
        gen_labels: Vec::with_capacity(n * shots),
        latents: Vec::with_capacity(n * shots),
    };
    for class in 0..n {
        let candidates = ds.train.class_indices(class);
        if candidates.len() < shots {
            return Err(Error::InvalidArg(format!(
                "train split has {} images for class {class}, episode needs {shots}",
                candidates.len()
            )));
        }
        let mut rng = seeds.rng_at("support", class as u64);
        let mut picks = rand::seq::index::sample(&mut rng, candidates.len(), shots).into_vec();
        picks.sort_unstable();
        for p in picks {
            ep.support_images.push(ds.train.images[candidates[p]].clone());
            ep.support_labels.push(class);
        }

        let records = cache.class_records(class);
        if records.len() < shots {
            return Err(Error::InsufficientCache {
                class,
                need: shots,
                have: records.len(),
            });
        }
        let mut rng = seeds.rng_at("generated", class as u64);
        let mut picks = rand::seq::index::sample(&mut rng, records.len(), shots).into_vec();
        picks.sort_unstable();
        for p in picks {
            ep.gen_images.push(records[p].image.clone());
            ep.gen_labels.push(class);
            ep.latents.push(records[p].latent.clone());
        }
    }
    debug_assert!(ep.check_balance());
    Ok(ep)
}

// ── augmentation ────────────────────────────────────────────────────────

/// Which label-preserving transforms to apply, in the fixed order
/// scale -> rotate -> crop -> color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub scale: bool,
    pub crop: bool,
    pub rotate: bool,
    pub color: bool,
}

impl AugmentPolicy {
    pub fn none() -> AugmentPolicy {
        AugmentPolicy::default()
    }

    pub fn all() -> AugmentPolicy {
        AugmentPolicy { scale: true, crop: true, rotate: true, color: true }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::none()
    }
}

/// Applies the policy per image with a per-image seed stream. The empty
/// policy returns bit-exact copies; transformed pixels are clamped to
/// [0, 1] at the end.
pub fn augment(images: &[Tensor], policy: AugmentPolicy, seeds: &SeedSplitter) -> Vec<Tensor> {
    if policy.is_identity() {
        return images.to_vec();
    }
    images
        .iter()
        .enumerate()
        .map(|(i, img)| augment_one(img, policy, &mut seeds.rng_at("augment", i as u64)))
        .collect()
}

fn augment_one(img: &Tensor, policy: AugmentPolicy, rng: &mut ChaCha8Rng) -> Tensor {
    let s = img.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let mut cur = img.data().to_vec();
    if policy.scale {
        let factor = rng.gen_range(0.85..1.15);
        cur = resample(&cur, ch, h, w, |y, x| {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            (cy + (y - cy) / factor, cx + (x - cx) / factor)
        });
    }
    if policy.rotate {
        let a: f64 = rng.gen_range(-0.26..0.26);
        let (ca, sa) = (a.cos(), a.sin());
        cur = resample(&cur, ch, h, w, |y, x| {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let (dy, dx) = (y - cy, x - cx);
            (cy + ca * dy - sa * dx, cx + sa * dy + ca * dx)
        });
    }
    if policy.crop {
        // Random shift with edge replication, the pad-then-crop equivalent.
        let dy = rng.gen_range(-3i64..=3);
        let dx = rng.gen_range(-3i64..=3);
        cur = resample(&cur, ch, h, w, |y, x| (y + dy as f64, x + dx as f64));
    }
    if policy.color {
        let brightness = rng.gen_range(0.85..1.15);
        for v in cur.iter_mut() {
            *v *= brightness;
        }
    }
    for v in cur.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(s, cur).unwrap()
}

/// Rebuilds an image by bilinear lookup at `src(y, x)` source coordinates,
/// clamping reads to the border.
fn resample(
    data: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    src: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let read = |c: usize, y: i64, x: i64| {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        data[c * h * w + yy * w + xx]
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for c in 0..ch {
                let v00 = read(c, y0, x0);
                let v01 = read(c, y0, x0 + 1);
                let v10 = read(c, y0 + 1, x0);
                let v11 = read(c, y0 + 1, x0 + 1);
                out[c * h * w + y * w + x] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}
