//! Class-conditional latent diffusion: the generative stack that feeds
//! joint training.
//!
//! Pipeline: an autoencoder learns a 4-channel 4x4 latent space over the
//! dataset's `pool` split (8x spatial compression), a denoiser learns
//! noise prediction in that space (normalized per channel), and a
//! deterministic first-order sampler walks the schedule backwards to
//! produce class-conditioned latents. Each sampled latent is decoded
//! immediately and stored with its image, so `image == decode(latent)`
//! holds bit-exactly for every cached record.
//!
//! Condition tokens are `class * 10 + variant`: ten variants per class,
//! trained against the dataset's per-sample stripe phase bins, give the
//! sampler an intra-class diversity dial that costs no text model.

use crate::data::SyntheticDataset;
use crate::nn::{load_entries, save_entries, Autoencoder, DenoiserConfig, DenoiserNet};
use crate::seeds::{Fnv, SeedSplitter};
use crate::tensor::{Tape, Tensor};
use crate::train::{clear_grads, AdamW};
use crate::{Error, Result};
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Distinct condition variants per class; matches the dataset's appearance
/// modes one-to-one so each token names a (class, mode) population.
pub const N_VARIANTS: usize = crate::data::STYLE_MODES;
/// Latent geometry: image side / 8.
pub const LATENT_HW: usize = crate::data::IMAGE_HW / 8;
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_batch: usize,
    pub denoiser_epochs: usize,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
    pub denoiser_hidden: usize,
    pub records_per_class: usize,
    pub gen_batch: usize,
}

impl Default for DiffusionConfig {
    fn default() -> DiffusionConfig {
        DiffusionConfig {
            t_steps: 50,
            // Endpoints sized so the terminal signal fraction is ~1% at 50
            // steps; the textbook 1e-4..0.02 pair assumes 1000 steps and
            // would leave 60% signal at T, breaking N(0,1) initialization.
            beta_start: 4e-3,
            beta_end: 0.17,
            ae_epochs: 30,
            ae_lr: 2e-3,
            ae_batch: 16,
            denoiser_epochs: 60,
            denoiser_lr: 2e-3,
            denoiser_batch: 32,
            denoiser_hidden: 48,
            records_per_class: 20,
            gen_batch: 2,
        }
    }
}

// ── schedule ────────────────────────────────────────────────────────────

/// Linear noise schedule with precomputed signal fractions. `beta(t)` and
/// `alpha_bar(t)` are 1-indexed; `alpha_bar(0) == 1` is the clean-data
/// anchor the sampler's final step lands on.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArg(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let mut alpha_bars = Vec::with_capacity(t_steps + 1);
        alpha_bars.push(1.0);
        for &b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        debug_assert!(alpha_bars.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    /// 1-indexed.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Signal fraction after t forward steps; t = 0 gives exactly 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Stable fingerprint of the schedule, stored in cache manifests so a
    /// cache built under one schedule is never silently reused under
    /// another.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.betas.len() as u64);
        for &b in &self.betas {
            h.write_f64(b);
        }
        h.finish()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.t_steps(),
            });
        }
        Ok(())
    }
}

/// Forward process: sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * noise.
pub fn add_noise(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Shape {
            op: "add_noise",
            detail: format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
        });
    }
    let ab = sched.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &e)| s0 * a + s1 * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

// ── latent statistics ───────────────────────────────────────────────────

/// Per-channel mean and std of the autoencoder's latent space. Diffusion
/// runs in the normalized space so the N(0,1) sampling prior matches the
/// data marginal at t = T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn latent_stats(latents: &[Tensor]) -> Result<LatentStats> {
    let Some(first) = latents.first() else {
        return Err(Error::InvalidArg("no latents to take statistics of".into()));
    };
    let ch = first.shape()[0];
    let per = first.numel() / ch;
    let n = (latents.len() * per) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for z in latents {
        for c in 0..ch {
            for &v in &z.data()[c * per..(c + 1) * per] {
                mean[c] += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for z in latents {
        for c in 0..ch {
            for &v in &z.data()[c * per..(c + 1) * per] {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| (v / n).sqrt().max(1e-6))
        .collect();
    Ok(LatentStats { mean, std })
}

pub fn normalize_latent(z: &Tensor, stats: &LatentStats) -> Tensor {
    channel_affine(z, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn denormalize_latent(z: &Tensor, stats: &LatentStats) -> Tensor {
    channel_affine(z, |c, v| v * stats.std[c] + stats.mean[c])
}

fn channel_affine(z: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let ch = z.shape()[0];
    let per = z.numel() / ch;
    let mut data = z.data().to_vec();
    for c in 0..ch {
        for v in &mut data[c * per..(c + 1) * per] {
            *v = f(c, *v);
        }
    }
    Tensor::from_vec(z.shape(), data).unwrap()
}

// ── autoencoder training ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeReport {
    /// Mean reconstruction MSE per epoch, training order.
    pub epoch_mse: Vec<f64>,
    pub final_mse: f64,
}

pub fn train_autoencoder(
    images: &[Tensor],
    cfg: &DiffusionConfig,
    seeds: &SeedSplitter,
) -> Result<(Autoencoder, AeReport)> {
    if images.is_empty() {
        return Err(Error::InvalidArg("autoencoder needs training images".into()));
    }
    let mut ae = Autoencoder::new(&seeds.scope("init"));
    let mut opt_enc = AdamW::new(&ae.encoder.params);
    let mut opt_dec = AdamW::new(&ae.decoder.params);
    let batch = cfg.ae_batch.max(1).min(images.len());
    let mut epoch_mse = Vec::with_capacity(cfg.ae_epochs);
    for epoch in 0..cfg.ae_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut seeds.rng_at("epoch", epoch as u64));
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x = Tensor::stack(&refs)?;
            let mut tape = Tape::new();
            let be = ae.encoder.params.bind(&mut tape);
            let bd = ae.decoder.params.bind(&mut tape);
            let xv = tape.leaf(x.shape(), x.data().to_vec(), false)?;
            let z = ae.encoder.forward(&mut tape, &be, xv)?;
            let y = ae.decoder.forward(&mut tape, &bd, z)?;
            let neg = tape.scale(xv, -1.0)?;
            let diff = tape.add(y, neg)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    phase: "autoencoder",
                    step,
                });
            }
            tape.backward(loss)?;
            ae.encoder.params.harvest(&tape, &be);
            ae.decoder.params.harvest(&tape, &bd);
            opt_enc.step(&mut ae.encoder.params, &|_| cfg.ae_lr, 0.0);
            opt_dec.step(&mut ae.decoder.params, &|_| cfg.ae_lr, 0.0);
            clear_grads(&mut ae.encoder.params);
            clear_grads(&mut ae.decoder.params);
            sum += loss_val;
            steps += 1;
        }
        epoch_mse.push(sum / steps.max(1) as f64);
    }
    let final_mse = epoch_mse.last().copied().unwrap_or(f64::NAN);
    Ok((ae, AeReport { epoch_mse, final_mse }))
}

/// Encodes images to raw (unnormalized) latents with the frozen encoder.
pub fn encode_images(ae: &Autoencoder, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let x = Tensor::stack(&refs)?;
        let mut tape = Tape::new();
        let be = ae.encoder.params.bind_frozen(&mut tape);
        let xv = tape.leaf(x.shape(), x.data().to_vec(), false)?;
        let z = ae.encoder.forward(&mut tape, &be, xv)?;
        out.extend(split_rows(&tape.tensor(z)));
    }
    Ok(out)
}

/// Decodes latents to images with the frozen decoder. Per-sample
/// arithmetic is independent of batch grouping, so any chunking produces
/// bit-identical images.
pub fn decode_latents(ae_decoder: &crate::nn::LatentDecoder, latents: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(32) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let z = Tensor::stack(&refs)?;
        let mut tape = Tape::new();
        let bd = ae_decoder.params.bind_frozen(&mut tape);
        let zv = tape.leaf(z.shape(), z.data().to_vec(), false)?;
        let y = ae_decoder.forward(&mut tape, &bd, zv)?;
        out.extend(split_rows(&tape.tensor(y)));
    }
    Ok(out)
}

fn split_rows(batched: &Tensor) -> Vec<Tensor> {
    let s = batched.shape();
    let tail: Vec<usize> = s[1..].to_vec();
    let per: usize = tail.iter().product();
    (0..s[0])
        .map(|i| {
            Tensor::from_vec(&tail, batched.data()[i * per..(i + 1) * per].to_vec()).unwrap()
        })
        .collect()
}

// ── denoiser training ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserReport {
    /// Noise-prediction MSE of the untrained net on the fixed validation
    /// draws; ~1.0 because the final layer starts at zero.
    pub untrained_val_mse: f64,
    /// Mean training-batch MSE per epoch; each epoch uses fresh (t, noise)
    /// draws, so this wanders more than the validation trace.
    pub epoch_train_mse: Vec<f64>,
    /// MSE on the fixed validation draws after each epoch; comparable
    /// across epochs because the draws never change.
    pub epoch_val_mse: Vec<f64>,
    pub final_val_mse: f64,
}

/// Trains noise prediction on normalized latents. `variants` are the
/// per-sample condition variant indices (0..10), matched at sampling time
/// by the variant plane.
pub fn train_denoiser(
    latents: &[Tensor],
    labels: &[usize],
    variants: &[usize],
    n_classes: usize,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    seeds: &SeedSplitter,
) -> Result<(DenoiserNet, DenoiserReport)> {
    if latents.is_empty() {
        return Err(Error::InvalidArg("denoiser needs training latents".into()));
    }
    if latents.len() != labels.len() || latents.len() != variants.len() {
        return Err(Error::InvalidArg(format!(
            "{} latents vs {} labels vs {} variants",
            latents.len(),
            labels.len(),
            variants.len()
        )));
    }
    let net_cfg = DenoiserConfig {
        latent_channels: latents[0].shape()[0],
        n_classes,
        hidden: cfg.denoiser_hidden,
        t_max: sched.t_steps(),
    };
    let mut net = DenoiserNet::new(net_cfg, &seeds.scope("init"));
    let mut opt = AdamW::new(&net.params);

    // Fixed validation draws: (sample, timestep, noise) triples reused for
    // every measurement so val MSE moves only when the net does.
    let mut val_rng = seeds.rng("val");
    let val_count = 512.min(latents.len() * 8);
    let val: Vec<(usize, usize, Tensor)> = (0..val_count)
        .map(|i| {
            let idx = i % latents.len();
            let t = uniform_t(&mut val_rng, sched.t_steps());
            let eps = gaussian_like(&latents[idx], &mut val_rng);
            (idx, t, eps)
        })
        .collect();
    let val_mse = |net: &DenoiserNet| -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in val.chunks(32) {
            let noisy: Vec<Tensor> = chunk
                .iter()
                .map(|(idx, t, eps)| add_noise(&latents[*idx], *t, eps, sched))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = noisy.iter().collect();
            let x = Tensor::stack(&refs)?;
            let cls: Vec<usize> = chunk.iter().map(|(idx, ..)| labels[*idx]).collect();
            let vars: Vec<f64> = chunk
                .iter()
                .map(|(idx, ..)| variants[*idx] as f64 / N_VARIANTS as f64)
                .collect();
            let ts: Vec<usize> = chunk.iter().map(|(_, t, _)| *t).collect();
            let cond = net.conditioned_input(&x, &cls, &vars, &ts)?;
            let mut tape = Tape::new();
            let bound = net.params.bind_frozen(&mut tape);
            let xv = tape.leaf(cond.shape(), cond.data().to_vec(), false)?;
            let pred = net.forward(&mut tape, &bound, xv)?;
            let pred_data = tape.data(pred);
            for (i, (_, _, eps)) in chunk.iter().enumerate() {
                let per = eps.numel();
                for (p, e) in pred_data[i * per..(i + 1) * per].iter().zip(eps.data()) {
                    sum += (p - e) * (p - e);
                }
                n += per;
            }
        }
        Ok(sum / n as f64)
    };

    let untrained_val_mse = val_mse(&net)?;
    let batch = cfg.denoiser_batch.max(1).min(latents.len());
    let mut epoch_train_mse = Vec::with_capacity(cfg.denoiser_epochs);
    let mut epoch_val_mse = Vec::with_capacity(cfg.denoiser_epochs);
    for epoch in 0..cfg.denoiser_epochs {
        let mut rng = seeds.rng_at("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..latents.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let mut noisy = Vec::with_capacity(chunk.len());
            let mut eps_flat = Vec::with_capacity(chunk.len() * latents[0].numel());
            let mut ts = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let t = uniform_t(&mut rng, sched.t_steps());
                let eps = gaussian_like(&latents[idx], &mut rng);
                noisy.push(add_noise(&latents[idx], t, &eps, sched)?);
                eps_flat.extend_from_slice(eps.data());
                ts.push(t);
            }
            let refs: Vec<&Tensor> = noisy.iter().collect();
            let x = Tensor::stack(&refs)?;
            let cls: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let vars: Vec<f64> = chunk
                .iter()
                .map(|&i| variants[i] as f64 / N_VARIANTS as f64)
                .collect();
            let cond = net.conditioned_input(&x, &cls, &vars, &ts)?;

            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape);
            let xv = tape.leaf(cond.shape(), cond.data().to_vec(), false)?;
            let pred = net.forward(&mut tape, &bound, xv)?;
            let target = tape.leaf(&pred_shape(&tape, pred), eps_flat, false)?;
            let neg = tape.scale(target, -1.0)?;
            let diff = tape.add(pred, neg)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    phase: "denoiser",
                    step,
                });
            }
            tape.backward(loss)?;
            net.params.harvest(&tape, &bound);
            opt.step(&mut net.params, &|_| cfg.denoiser_lr, 0.0);
            clear_grads(&mut net.params);
            sum += loss_val;
            steps += 1;
        }
        epoch_train_mse.push(sum / steps.max(1) as f64);
        epoch_val_mse.push(val_mse(&net)?);
    }
    let final_val_mse = epoch_val_mse.last().copied().unwrap_or(untrained_val_mse);
    Ok((
        net,
        DenoiserReport {
            untrained_val_mse,
            epoch_train_mse,
            epoch_val_mse,
            final_val_mse,
        },
    ))
}

fn pred_shape(tape: &Tape, v: crate::tensor::Var) -> Vec<usize> {
    tape.shape(v).to_vec()
}

fn uniform_t(rng: &mut ChaCha8Rng, t_max: usize) -> usize {
    use rand::Rng;
    rng.gen_range(1..=t_max)
}

fn gaussian_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..t.numel())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

// ── sampling ────────────────────────────────────────────────────────────

/// Deterministic reverse walk (eta = 0): from z_T ~ N(0,1) seeded per
/// sample, repeatedly predict noise, reconstruct the clean estimate, and
/// re-embed at the next (lower) noise level. Output is in the normalized
/// latent space. Identical (seed, class, variant, parameters) give
/// bit-identical latents, independent of how samples are batched.
pub fn sample_latent_batch(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    classes: &[usize],
    variant_norms: &[f64],
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    if classes.len() != variant_norms.len() || classes.len() != seeds.len() {
        return Err(Error::InvalidArg(format!(
            "{} classes vs {} variants vs {} seeds",
            classes.len(),
            variant_norms.len(),
            seeds.len()
        )));
    }
    if classes.is_empty() {
        return Ok(Vec::new());
    }
    let shape = [LATENT_CHANNELS, LATENT_HW, LATENT_HW];
    let mut zs: Vec<Tensor> = seeds
        .iter()
        .map(|&s| gaussian_like(&Tensor::zeros(&shape), &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let t_total = sched.t_steps();
    for t in (1..=t_total).rev() {
        let refs: Vec<&Tensor> = zs.iter().collect();
        let x = Tensor::stack(&refs)?;
        let ts = vec![t; zs.len()];
        let cond = net.conditioned_input(&x, classes, variant_norms, &ts)?;
        let mut tape = Tape::new();
        let bound = net.params.bind_frozen(&mut tape);
        let xv = tape.leaf(cond.shape(), cond.data().to_vec(), false)?;
        let pred = net.forward(&mut tape, &bound, xv)?;
        let eps_hat = tape.data(pred);
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let (s0, s1) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let (p0, p1) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let per = shape.iter().product::<usize>();
        for (i, z) in zs.iter_mut().enumerate() {
            let e = &eps_hat[i * per..(i + 1) * per];
            let data = z.data_mut();
            for j in 0..per {
                let x0 = (data[j] - s1 * e[j]) / s0;
                data[j] = p0 * x0 + p1 * e[j];
            }
            if !z.is_finite() {
                return Err(Error::NonFiniteSample { step: t });
            }
        }
    }
    Ok(zs)
}

/// One latent; convenience wrapper over the batch sampler.
pub fn sample_latent(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    class: usize,
    variant_norm: f64,
    seed: u64,
) -> Result<Tensor> {
    Ok(sample_latent_batch(net, sched, &[class], &[variant_norm], &[seed])?.remove(0))
}

// ── generation records and cache ────────────────────────────────────────

/// One generated sample: the sampler's final pre-decoder latent (raw
/// space, decoder-ready) and the image decoded from it in the same call.
#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub latent: Tensor,
    pub image: Tensor,
    pub class: usize,
    pub condition_token: usize,
    pub seed: u64,
}

/// All records, indexed by class, plus the schedule fingerprint they were
/// built under.
#[derive(Debug, Clone)]
pub struct GenerationCache {
    pub records: Vec<Vec<GenerationRecord>>,
    pub schedule_hash: u64,
}

impl GenerationCache {
    pub fn n_classes(&self) -> usize {
        self.records.len()
    }

    pub fn class_records(&self, class: usize) -> &[GenerationRecord] {
        &self.records[class]
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.schedule_hash);
        h.write_u64(self.records.len() as u64);
        for row in &self.records {
            h.write_u64(row.len() as u64);
            for r in row {
                h.write_u64(r.class as u64);
                h.write_u64(r.condition_token as u64);
                h.write_u64(r.seed);
                for &v in r.latent.data() {
                    h.write_f64(v);
                }
                for &v in r.image.data() {
                    h.write_f64(v);
                }
            }
        }
        h.finish()
    }
}

/// Samples `count` records for one class: seeds run seed_base + i, and the
/// ten condition variants are spread evenly across the count. Every record
/// decodes its latent immediately; the stored pair is from one call.
pub fn generate_class_set(
    net: &DenoiserNet,
    decoder: &crate::nn::LatentDecoder,
    stats: &LatentStats,
    sched: &NoiseSchedule,
    class: usize,
    count: usize,
    batch_size: usize,
    seed_base: u64,
) -> Result<Vec<GenerationRecord>> {
    if batch_size == 0 {
        return Err(Error::InvalidArg("generation batch must be positive".into()));
    }
    let mut records = Vec::with_capacity(count);
    let mut i = 0usize;
    while i < count {
        let n = batch_size.min(count - i);
        let idxs: Vec<usize> = (i..i + n).collect();
        let variants: Vec<usize> = idxs
            .iter()
            .map(|&j| (j * N_VARIANTS / count).min(N_VARIANTS - 1))
            .collect();
        let vnorms: Vec<f64> = variants
            .iter()
            .map(|&v| v as f64 / N_VARIANTS as f64)
            .collect();
        let seeds: Vec<u64> = idxs.iter().map(|&j| seed_base.wrapping_add(j as u64)).collect();
        let classes = vec![class; n];
        let zs = sample_latent_batch(net, sched, &classes, &vnorms, &seeds)?;
        let raw: Vec<Tensor> = zs.iter().map(|z| denormalize_latent(z, stats)).collect();
        let images = decode_latents(decoder, &raw)?;
        for (k, (latent, image)) in raw.into_iter().zip(images).enumerate() {
            records.push(GenerationRecord {
                latent,
                image,
                class,
                condition_token: class * N_VARIANTS + variants[k],
                seed: seeds[k],
            });
        }
        i += n;
    }
    Ok(records)
}

/// Re-decodes every cached latent and demands bit equality with the
/// stored image.
pub fn verify_cache_alignment(
    cache: &GenerationCache,
    decoder: &crate::nn::LatentDecoder,
) -> Result<()> {
    for row in &cache.records {
        let latents: Vec<Tensor> = row.iter().map(|r| r.latent.clone()).collect();
        let decoded = decode_latents(decoder, &latents)?;
        for (r, d) in row.iter().zip(&decoded) {
            let ok = r.image.shape() == d.shape()
                && r.image
                    .data()
                    .iter()
                    .zip(d.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !ok {
                return Err(Error::InvalidArg(format!(
                    "cached image for class {} seed {} does not decode from its latent",
                    r.class, r.seed
                )));
            }
        }
    }
    Ok(())
}

// ── the full generative stack ───────────────────────────────────────────

/// Everything build-cache produces besides the records: the trained
/// autoencoder, the denoiser, the latent statistics, and the schedule.
#[derive(Debug, Clone)]
pub struct GenerativeStack {
    pub autoencoder: Autoencoder,
    pub denoiser: DenoiserNet,
    pub stats: LatentStats,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildReport {
    pub ae: AeReport,
    pub denoiser: DenoiserReport,
}

/// Trains the generative stack on the dataset's pool split and samples the
/// full record cache. Class rows are generated in parallel; per-class seed
/// bases come from named streams, so the result is independent of thread
/// scheduling.
pub fn build_generation_cache(
    ds: &SyntheticDataset,
    cfg: &DiffusionConfig,
    seeds: &SeedSplitter,
) -> Result<(GenerationCache, GenerativeStack, BuildReport)> {
    let sched = NoiseSchedule::from_config(cfg)?;
    let (ae, ae_report) = train_autoencoder(&ds.pool.images, cfg, &seeds.scope("ae"))?;
    let raw_latents = encode_images(&ae, &ds.pool.images)?;
    let stats = latent_stats(&raw_latents)?;
    let latents: Vec<Tensor> = raw_latents
        .iter()
        .map(|z| normalize_latent(z, &stats))
        .collect();
    let variants: Vec<usize> = ds.pool.styles.iter().map(|&s| crate::data::style_mode(s)).collect();
    let (denoiser, den_report) = train_denoiser(
        &latents,
        &ds.pool.labels,
        &variants,
        ds.cfg.n_classes,
        cfg,
        &sched,
        &seeds.scope("denoiser"),
    )?;

    use rayon::prelude::*;
    let seed_bases: Vec<u64> = (0..ds.cfg.n_classes)
        .map(|c| seeds.substream("gen", c as u64))
        .collect();
    let records: Vec<Vec<GenerationRecord>> = (0..ds.cfg.n_classes)
        .into_par_iter()
        .map(|c| {
            generate_class_set(
                &denoiser,
                &ae.decoder,
                &stats,
                &sched,
                c,
                cfg.records_per_class,
                cfg.gen_batch,
                seed_bases[c],
            )
        })
        .collect::<Result<_>>()?;

    let cache = GenerationCache {
        records,
        schedule_hash: sched.hash(),
    };
    let stack = GenerativeStack {
        autoencoder: ae,
        denoiser,
        stats,
        schedule: sched,
    };
    Ok((
        cache,
        stack,
        BuildReport {
            ae: ae_report,
            denoiser: den_report,
        },
    ))
}

// ── persistence ─────────────────────────────────────────────────────────

const RECORD_MAGIC: &[u8; 4] = b"JLTR";
const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheManifest {
    n_classes: usize,
    records_per_class: usize,
    diffusion: DiffusionConfig,
    denoiser_n_classes: usize,
    schedule_hash: u64,
    latent_stats: LatentStats,
    content_hash: u64,
}

/// Writes records, the three model checkpoints, and a manifest. The
/// manifest is written last, so its presence implies a complete cache.
pub fn save_cache(
    dir: &Path,
    cache: &GenerationCache,
    stack: &GenerativeStack,
    cfg: &DiffusionConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, row) in cache.records.iter().enumerate() {
        let mut buf = Vec::new();
        buf.extend_from_slice(RECORD_MAGIC);
        buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(row.len() as u64).to_le_bytes());
        for r in row {
            buf.extend_from_slice(&(r.class as u64).to_le_bytes());
            buf.extend_from_slice(&(r.condition_token as u64).to_le_bytes());
            buf.extend_from_slice(&r.seed.to_le_bytes());
            write_tensor(&mut buf, &r.latent);
            write_tensor(&mut buf, &r.image);
        }
        crate::fsio::write_atomic(&dir.join(format!("class_{c:04}.bin")), &buf)?;
    }
    save_entries(
        &dir.join("encoder.ckpt"),
        &stack.autoencoder.encoder.params.entries("ae_enc"),
    )?;
    save_entries(
        &dir.join("decoder.ckpt"),
        &stack.autoencoder.decoder.params.entries("ae_dec"),
    )?;
    save_entries(
        &dir.join("denoiser.ckpt"),
        &stack.denoiser.params.entries("denoiser"),
    )?;
    let manifest = CacheManifest {
        n_classes: cache.n_classes(),
        records_per_class: cache.records.first().map(|r| r.len()).unwrap_or(0),
        diffusion: cfg.clone(),
        denoiser_n_classes: stack.denoiser.config().n_classes,
        schedule_hash: cache.schedule_hash,
        latent_stats: stack.stats.clone(),
        content_hash: cache.content_hash(),
    };
    crate::fsio::write_json_atomic(&dir.join("manifest.json"), &manifest)
}

/// True if a complete cache (manifest present) exists at `dir`.
pub fn cache_exists(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

pub fn load_cache(dir: &Path) -> Result<(GenerationCache, GenerativeStack, DiffusionConfig)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact {
            what: format!("generation cache at {}", dir.display()),
            producer: "build-cache",
        });
    }
    let manifest: CacheManifest = crate::fsio::read_json(&manifest_path)?;
    let sched = NoiseSchedule::from_config(&manifest.diffusion)?;
    if sched.hash() != manifest.schedule_hash {
        return Err(Error::corrupt(
            &manifest_path,
            "schedule hash does not match its own parameters",
        ));
    }

    let mut records = Vec::with_capacity(manifest.n_classes);
    for c in 0..manifest.n_classes {
        let path = dir.join(format!("class_{c:04}.bin"));
        records.push(read_class_records(&path)?);
    }
    let cache = GenerationCache {
        records,
        schedule_hash: manifest.schedule_hash,
    };
    if cache.content_hash() != manifest.content_hash {
        return Err(Error::corrupt(
            dir.join("manifest.json"),
            "cache content hash mismatch; records were modified or partially written",
        ));
    }

    let dummy = SeedSplitter::new(0);
    let mut autoencoder = Autoencoder::new(&dummy.scope("ae"));
    autoencoder
        .encoder
        .params
        .load_from_entries("ae_enc", &load_entries(&dir.join("encoder.ckpt"))?)?;
    autoencoder
        .decoder
        .params
        .load_from_entries("ae_dec", &load_entries(&dir.join("decoder.ckpt"))?)?;
    let mut denoiser = DenoiserNet::new(
        DenoiserConfig {
            latent_channels: LATENT_CHANNELS,
            n_classes: manifest.denoiser_n_classes,
            hidden: manifest.diffusion.denoiser_hidden,
            t_max: manifest.diffusion.t_steps,
        },
        &dummy.scope("denoiser"),
    );
    denoiser
        .params
        .load_from_entries("denoiser", &load_entries(&dir.join("denoiser.ckpt"))?)?;

    let stack = GenerativeStack {
        autoencoder,
        denoiser,
        stats: manifest.latent_stats.clone(),
        schedule: sched,
    };
    Ok((cache, stack, manifest.diffusion))
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_class_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::corrupt(path, format!("truncated at byte {pos}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != RECORD_MAGIC {
        return Err(Error::corrupt(path, "bad record-file magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != RECORD_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    if count > 1 << 20 {
        return Err(Error::corrupt(path, format!("implausible record count {count}")));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let class = read_u64(&mut pos)? as usize;
        let token = read_u64(&mut pos)? as usize;
        let seed = read_u64(&mut pos)?;
        let latent = read_tensor_from(&bytes, &mut pos, path)?;
        let image = read_tensor_from(&bytes, &mut pos, path)?;
        records.push(GenerationRecord {
            latent,
            image,
            class,
            condition_token: token,
            seed,
        });
    }
    if pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after last record"));
    }
    Ok(records)
}

fn read_tensor_from(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<Tensor> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::corrupt(path, format!("truncated at byte {pos}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let rank = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap());
    if rank > 8 {
        return Err(Error::corrupt(path, format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap());
        if d > 1 << 20 {
            return Err(Error::corrupt(path, format!("tensor dim {d}")));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
    }
    Tensor::from_vec(&shape, data)
}
