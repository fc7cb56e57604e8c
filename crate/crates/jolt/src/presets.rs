//! Canned experiment setups.
//!
//! Three tiers: [`desk_default`] is the documented defaults everywhere,
//! [`reference_task`] is the calibrated 10-way setting the direction
//! checks and sweeps run on, and [`quick_smoke`] is a minutes-to-seconds
//! shrink for pipeline exercises. A `Setup` is plain data; the CLI and
//! the examples both start from one.

use crate::data::{DataConfig, STANDARD_SHOTS};
use crate::diffusion::DiffusionConfig;
use crate::train::TrainConfig;

/// The alpha grid swept by the latent-factor ablation.
pub const ALPHA_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Shot counts crossed by the data/order/shot ablations.
pub const SHOT_SWEEP: [usize; 5] = STANDARD_SHOTS;

#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    /// Support size for single-run commands and the alpha sweep.
    pub shots: usize,
    /// Paired seeds for multi-seed comparisons.
    pub seeds: Vec<u64>,
    /// Root seed for single-run commands.
    pub seed: u64,
}

impl Setup {
    /// Every cross-field requirement in one place: the dataset can supply
    /// the support size, the cache can match it, and paired runs have
    /// seeds to pair.
    pub fn check(&self) -> crate::Result<()> {
        let bad = |msg: String| Err(crate::Error::Config(msg));
        if self.data.train_per_class < self.shots {
            return bad(format!(
                "train_per_class {} cannot supply {}-shot episodes",
                self.data.train_per_class, self.shots
            ));
        }
        if self.diffusion.records_per_class < self.shots {
            return bad(format!(
                "records_per_class {} cannot supply {}-shot episodes",
                self.diffusion.records_per_class, self.shots
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed required".into());
        }
        self.train.validate()
    }
}

/// Documented defaults throughout: 10 classes, 20 generated records per
/// class, the standard training recipe, 16-shot, five paired seeds.
pub fn desk_default() -> Setup {
    Setup {
        data: DataConfig::default(),
        diffusion: DiffusionConfig::default(),
        train: TrainConfig::default(),
        shots: 16,
        seeds: vec![101, 102, 103, 104, 105],
        seed: 7,
    }
}

/// The calibrated 10-way task the direction checks run on: enough pixel
/// noise that 16 real shots per class leave headroom, a training budget
/// sized so a full three-recipe, five-seed comparison finishes in minutes
/// on one core. Final-only evaluation keeps sweep cells cheap.
pub fn reference_task() -> Setup {
    let mut s = desk_default();
    s.data.noise = 0.35;
    s.data.color_jitter = 0.05;
    s.data.train_per_class = 16;
    s.data.test_per_class = 30;
    s.data.pool_per_class = 24;
    s.train.base_lr = 1e-3;
    s.train.epochs = 25;
    s.train.eval_every = 0;
    s
}

/// Everything shrunk until a full pipeline pass takes seconds: three
/// classes, a toy diffusion budget, two-epoch training. For exercising
/// plumbing, not for drawing conclusions.
pub fn quick_smoke() -> Setup {
    Setup {
        data: DataConfig {
            n_classes: 3,
            train_per_class: 4,
            test_per_class: 6,
            pool_per_class: 8,
            noise: 0.1,
            color_jitter: 0.02,
        },
        diffusion: DiffusionConfig {
            ae_epochs: 4,
            denoiser_epochs: 6,
            denoiser_hidden: 16,
            records_per_class: 4,
            ..DiffusionConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            eval_every: 0,
            ..TrainConfig::default()
        },
        shots: 2,
        seeds: vec![11, 12],
        seed: 3,
    }
}
