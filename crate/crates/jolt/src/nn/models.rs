//! Model definitions: the two classifier encoders, linear probes, the image
//! autoencoder, and the conditional latent denoiser.
//!
//! Constructors take a [`SeedSplitter`] already scoped to the component, so
//! two instances built from sibling scopes get independent but reproducible
//! initializations. Forward methods record onto a caller-supplied tape via a
//! [`Bound`] handle set, which may be trainable (`bind`) or frozen
//! (`bind_frozen`); both run the same code.

use super::{bias_uniform, kaiming_uniform, Bound, ParameterSet};
use crate::seeds::SeedSplitter;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

// ── image encoder ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    /// Output channels per block; each block is conv3x3 -> relu -> 2x2 pool.
    pub channels: Vec<usize>,
    /// Square input side; must be divisible by 2^blocks.
    pub input_hw: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> ImageEncoderConfig {
        ImageEncoderConfig {
            in_channels: 3,
            channels: vec![32, 64, 64],
            input_hw: 32,
        }
    }
}

/// Image classifier backbone: stacked conv blocks, each halving the spatial
/// side, then a global spatial mean to a flat feature vector.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    pub params: ParameterSet,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig, seeds: &SeedSplitter) -> ImageEncoder {
        assert!(!cfg.channels.is_empty(), "need at least one conv block");
        assert!(
            cfg.input_hw % (1 << cfg.channels.len()) == 0,
            "input side {} not divisible by 2^{} blocks",
            cfg.input_hw,
            cfg.channels.len()
        );
        let mut params = ParameterSet::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = cin * 9;
            let mut rng = seeds.rng_at("conv", i as u64);
            params.add(
                format!("conv{i}.w"),
                i,
                kaiming_uniform(&mut rng, &[cout, cin, 3, 3], fan_in),
            );
            params.add(format!("conv{i}.b"), i, bias_uniform(&mut rng, cout, fan_in));
            cin = cout;
        }
        ImageEncoder { cfg, params }
    }

    pub fn feature_dim(&self) -> usize {
        *self.cfg.channels.last().unwrap()
    }

    /// Depth to assign a probe stacked on top of this encoder.
    pub fn probe_depth(&self) -> usize {
        self.cfg.channels.len()
    }

    /// `x`: [B, in_channels, input_hw, input_hw] -> [B, feature_dim].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.cfg.channels.len() {
            h = tape.conv2d(h, bound.var(2 * i), bound.var(2 * i + 1), 1, 1)?;
            h = tape.relu(h);
            h = tape.max_pool2(h)?;
        }
        tape.mean_pool(h)
    }
}

// ── latent encoder ──────────────────────────────────────────────────────

/// Channel plan for the latent branch. Two conv layers exactly: the branch
/// is meant to stay far smaller than the image encoder (see the parameter
/// budget test below), and depth beyond two buys nothing at 4x4 spatial.
pub const LATENT_ENC_CHANNELS: [usize; 2] = [16, 32];

/// Latent classifier backbone: two 3x3 convs at full (4x4) resolution, then
/// a spatial mean. No pooling; the grid is already tiny.
#[derive(Debug, Clone)]
pub struct LatentEncoder {
    in_channels: usize,
    pub params: ParameterSet,
}

impl LatentEncoder {
    pub fn new(in_channels: usize, seeds: &SeedSplitter) -> LatentEncoder {
        let mut params = ParameterSet::new();
        let mut cin = in_channels;
        for (i, &cout) in LATENT_ENC_CHANNELS.iter().enumerate() {
            let fan_in = cin * 9;
            let mut rng = seeds.rng_at("conv", i as u64);
            params.add(
                format!("conv{i}.w"),
                i,
                kaiming_uniform(&mut rng, &[cout, cin, 3, 3], fan_in),
            );
            params.add(format!("conv{i}.b"), i, bias_uniform(&mut rng, cout, fan_in));
            cin = cout;
        }
        LatentEncoder { in_channels, params }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn feature_dim(&self) -> usize {
        LATENT_ENC_CHANNELS[1]
    }

    pub fn probe_depth(&self) -> usize {
        LATENT_ENC_CHANNELS.len()
    }

    /// `x`: [B, in_channels, H, W] -> [B, feature_dim].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..LATENT_ENC_CHANNELS.len() {
            h = tape.conv2d(h, bound.var(2 * i), bound.var(2 * i + 1), 1, 1)?;
            h = tape.relu(h);
        }
        tape.mean_pool(h)
    }
}

// ── linear probe ────────────────────────────────────────────────────────

/// Linear classification head over encoder features. Carries an explicit
/// depth so layer-wise lr decay sees it as the topmost layer of its branch.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub params: ParameterSet,
}

impl LinearProbe {
    pub fn new(in_dim: usize, n_classes: usize, depth: usize, seeds: &SeedSplitter) -> LinearProbe {
        let mut params = ParameterSet::new();
        let mut rng = seeds.rng("init");
        params.add(
            "w",
            depth,
            kaiming_uniform(&mut rng, &[in_dim, n_classes], in_dim),
        );
        params.add("b", depth, bias_uniform(&mut rng, n_classes, in_dim));
        LinearProbe { params }
    }

    /// `features`: [B, in_dim] -> logits [B, n_classes].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        tape.linear(features, bound.var(0), bound.var(1))
    }
}

// ── autoencoder ─────────────────────────────────────────────────────────

/// Compressor: three stride-2 convs, 32x32 images down to a 4x4 latent
/// grid. The last layer has no activation so latent values are unbounded.
#[derive(Debug, Clone)]
pub struct AeEncoder {
    pub params: ParameterSet,
}

const AE_ENC_PLAN: [(usize, usize); 3] = [(3, 16), (16, 16), (16, 4)];

impl AeEncoder {
    pub fn new(seeds: &SeedSplitter) -> AeEncoder {
        let mut params = ParameterSet::new();
        for (i, &(cin, cout)) in AE_ENC_PLAN.iter().enumerate() {
            let fan_in = cin * 9;
            let mut rng = seeds.rng_at("conv", i as u64);
            params.add(
                format!("conv{i}.w"),
                i,
                kaiming_uniform(&mut rng, &[cout, cin, 3, 3], fan_in),
            );
            params.add(format!("conv{i}.b"), i, bias_uniform(&mut rng, cout, fan_in));
        }
        AeEncoder { params }
    }

    pub fn latent_channels(&self) -> usize {
        AE_ENC_PLAN[2].1
    }

    /// `x`: [B, 3, 32, 32] -> [B, 4, 4, 4].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..AE_ENC_PLAN.len() {
            h = tape.conv2d(h, bound.var(2 * i), bound.var(2 * i + 1), 2, 1)?;
            if i + 1 < AE_ENC_PLAN.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Expander: three stride-2 transposed convs, 4x4 latents back up to 32x32
/// images. Output is unclamped; pixel-space consumers clamp to [0, 1].
#[derive(Debug, Clone)]
pub struct LatentDecoder {
    pub params: ParameterSet,
}

const AE_DEC_PLAN: [(usize, usize); 3] = [(4, 16), (16, 16), (16, 3)];

impl LatentDecoder {
    pub fn new(seeds: &SeedSplitter) -> LatentDecoder {
        let mut params = ParameterSet::new();
        for (i, &(cin, cout)) in AE_DEC_PLAN.iter().enumerate() {
            // Gather form reads cin values per output cell within a k4/s2
            // window footprint, so fan-in uses the kernel area.
            let fan_in = cin * 16;
            let mut rng = seeds.rng_at("convt", i as u64);
            params.add(
                format!("convt{i}.w"),
                i,
                kaiming_uniform(&mut rng, &[cin, cout, 4, 4], fan_in),
            );
            params.add(format!("convt{i}.b"), i, bias_uniform(&mut rng, cout, fan_in));
        }
        LatentDecoder { params }
    }

    /// `z`: [B, 4, 4, 4] -> [B, 3, 32, 32].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for i in 0..AE_DEC_PLAN.len() {
            h = tape.conv_transpose2d(h, bound.var(2 * i), bound.var(2 * i + 1), 2, 1)?;
            if i + 1 < AE_DEC_PLAN.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Encoder/decoder pair trained jointly on reconstruction.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: AeEncoder,
    pub decoder: LatentDecoder,
}

impl Autoencoder {
    pub fn new(seeds: &SeedSplitter) -> Autoencoder {
        Autoencoder {
            encoder: AeEncoder::new(&seeds.scope("enc")),
            decoder: LatentDecoder::new(&seeds.scope("dec")),
        }
    }
}

// ── denoiser ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub n_classes: usize,
    /// Hidden width of the two inner convs.
    pub hidden: usize,
    /// Largest valid timestep (schedule length).
    pub t_max: usize,
}

/// Noise predictor over latent grids, conditioned through extra input
/// planes: a one-hot class block, a variant scalar, and two timestep
/// embeddings. The final conv initializes to zero, so the untrained net
/// predicts zero noise everywhere; training has to earn every bit of signal.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    cfg: DenoiserConfig,
    pub params: ParameterSet,
}

impl DenoiserNet {
    pub fn new(cfg: DenoiserConfig, seeds: &SeedSplitter) -> DenoiserNet {
        assert!(cfg.t_max > 0, "schedule length must be positive");
        let cin = cfg.latent_channels + cfg.n_classes + 3;
        let mut params = ParameterSet::new();
        let mut rng = seeds.rng_at("conv", 0);
        params.add(
            "conv0.w",
            0,
            kaiming_uniform(&mut rng, &[cfg.hidden, cin, 3, 3], cin * 9),
        );
        params.add("conv0.b", 0, bias_uniform(&mut rng, cfg.hidden, cin * 9));
        let mut rng = seeds.rng_at("conv", 1);
        params.add(
            "conv1.w",
            1,
            kaiming_uniform(&mut rng, &[cfg.hidden, cfg.hidden, 3, 3], cfg.hidden * 9),
        );
        params.add("conv1.b", 1, bias_uniform(&mut rng, cfg.hidden, cfg.hidden * 9));
        params.add(
            "conv2.w",
            2,
            Tensor::zeros(&[cfg.latent_channels, cfg.hidden, 3, 3]),
        );
        params.add("conv2.b", 2, Tensor::zeros(&[cfg.latent_channels]));
        DenoiserNet { cfg, params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.latent_channels + self.cfg.n_classes + 3
    }

    /// Stacks conditioning planes onto a batch of noisy latents.
    ///
    /// Channel layout: `[latents | one-hot class | variant | t/T | cos(pi t/T)]`.
    /// Timesteps are 1-based and must not exceed `t_max`.
    pub fn conditioned_input(
        &self,
        noisy: &Tensor,
        classes: &[usize],
        variants: &[f64],
        timesteps: &[usize],
    ) -> Result<Tensor> {
        let s = noisy.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_channels {
            return Err(Error::Shape {
                op: "conditioned_input",
                detail: format!(
                    "latents must be [B, {}, H, W], got {s:?}",
                    self.cfg.latent_channels
                ),
            });
        }
        let (b, lc, h, w) = (s[0], s[1], s[2], s[3]);
        if classes.len() != b || variants.len() != b || timesteps.len() != b {
            return Err(Error::InvalidArg(format!(
                "batch is {b} but got {} classes, {} variants, {} timesteps",
                classes.len(),
                variants.len(),
                timesteps.len()
            )));
        }
        for &c in classes {
            if c >= self.cfg.n_classes {
                return Err(Error::InvalidArg(format!(
                    "class {c} out of range for {} classes",
                    self.cfg.n_classes
                )));
            }
        }
        for &t in timesteps {
            if t == 0 || t > self.cfg.t_max {
                return Err(Error::TimestepOutOfRange {
                    t,
                    max: self.cfg.t_max,
                });
            }
        }
        let cin = self.in_channels();
        let plane = h * w;
        let mut out = vec![0.0; b * cin * plane];
        for i in 0..b {
            let base = i * cin * plane;
            out[base..base + lc * plane]
                .copy_from_slice(&noisy.data()[i * lc * plane..(i + 1) * lc * plane]);
            let class_plane = base + (lc + classes[i]) * plane;
            out[class_plane..class_plane + plane].fill(1.0);
            let variant_plane = base + (lc + self.cfg.n_classes) * plane;
            out[variant_plane..variant_plane + plane].fill(variants[i]);
            let tf = timesteps[i] as f64 / self.cfg.t_max as f64;
            let t_plane = variant_plane + plane;
            out[t_plane..t_plane + plane].fill(tf);
            let cos_plane = t_plane + plane;
            out[cos_plane..cos_plane + plane].fill((std::f64::consts::PI * tf).cos());
        }
        Tensor::from_vec(&[b, cin, h, w], out)
    }

    /// `x`: conditioned input [B, in_channels, H, W] -> predicted noise
    /// [B, latent_channels, H, W].
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h0 = tape.conv2d(x, bound.var(0), bound.var(1), 1, 1)?;
        let h0 = tape.relu(h0);
        let h1 = tape.conv2d(h0, bound.var(2), bound.var(3), 1, 1)?;
        let h1 = tape.relu(h1);
        tape.conv2d(h1, bound.var(4), bound.var(5), 1, 1)
    }
}
