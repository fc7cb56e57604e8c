//! Losses, optimizer, schedules, EMA, and the two-phase training engine.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Episode, SyntheticDataset};
use crate::diffusion::{GenerationCache, LATENT_CHANNELS};
use crate::eval::{better, evaluate, EvalResult, WeightsUsed};
use crate::nn::{
    Bound, ImageEncoder, ImageEncoderConfig, LatentEncoder, LinearProbe, Param, ParameterSet,
};
use crate::seeds::SeedSplitter;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ── losses ──────────────────────────────────────────────────────────────

/// Smoothed target distribution: the true class keeps 1 - eps + eps/n and
/// every class receives eps/n.
pub fn smooth_targets(target: usize, n: usize, epsilon: f64) -> Result<Vec<f64>> {
    if target >= n {
        return Err(Error::InvalidArg(format!(
            "target {target} out of range for {n} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArg(format!(
            "smoothing epsilon {epsilon} outside [0, 1)"
        )));
    }
    let mut y = vec![epsilon / n as f64; n];
    y[target] += 1.0 - epsilon;
    Ok(y)
}

/// Convex combination of the two generated-phase losses: the latent branch
/// weighted by alpha, the image branch by 1 - alpha.
pub fn joint_loss(l_latent: f64, l_image: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArg(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_latent + (1.0 - alpha) * l_image)
}

// ── schedules ───────────────────────────────────────────────────────────

/// Cosine decay from `base_lr` to zero. The three anchor points (start,
/// midpoint, end) are pinned to their closed-form values exactly rather
/// than trusting `cos` rounding at pi/2 and pi.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArg(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(if step == 0 {
        base_lr
    } else if step == total_steps {
        0.0
    } else if 2 * step == total_steps {
        0.5 * base_lr
    } else {
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
    })
}

/// Layer-wise lr multiplier: the deepest layer (the probe) gets 1, each
/// layer below it another factor of `decay`.
pub fn llrd_scale(depth: usize, max_depth: usize, decay: f64) -> f64 {
    assert!(depth <= max_depth, "depth {depth} above max {max_depth}");
    decay.powi((max_depth - depth) as i32)
}

// ── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// AdamW over one parameter set. Decay is decoupled (applied to the value
/// before the adaptive step) and scales with the parameter's effective lr.
/// Parameters with no gradient this step are skipped entirely: no decay,
/// no state advance — an excluded branch is bit-frozen, not slowly shrunk.
#[derive(Debug, Clone)]
pub struct AdamW {
    slots: Vec<AdamSlot>,
}

impl AdamW {
    pub fn new(params: &ParameterSet) -> AdamW {
        AdamW {
            slots: params
                .iter()
                .map(|p| AdamSlot {
                    m: vec![0.0; p.tensor.numel()],
                    v: vec![0.0; p.tensor.numel()],
                    t: 0,
                })
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        lr_for: &dyn Fn(&Param) -> f64,
        weight_decay: f64,
    ) {
        assert_eq!(self.slots.len(), params.len(), "optimizer bound to another set");
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let p = params.at_mut(i);
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let lr = lr_for(p);
            slot.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                data[j] *= 1.0 - lr * weight_decay;
                slot.m[j] = ADAM_BETA1 * slot.m[j] + (1.0 - ADAM_BETA1) * grad[j];
                slot.v[j] = ADAM_BETA2 * slot.v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Drops any harvested gradients so a later phase cannot consume stale ones.
pub fn clear_grads(params: &mut ParameterSet) {
    for p in params.iter_mut() {
        p.tensor.set_grad(None);
    }
}

// ── EMA ─────────────────────────────────────────────────────────────────

/// Exponential moving average of a parameter set:
/// shadow <- m * shadow + (1 - m) * current.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    pub momentum: f64,
    shadow: ParameterSet,
}

impl EmaShadow {
    /// Shadow initialized to a copy of the current parameters.
    pub fn new(params: &ParameterSet, momentum: f64) -> EmaShadow {
        assert!((0.0..=1.0).contains(&momentum));
        EmaShadow {
            momentum,
            shadow: params.clone(),
        }
    }

    /// Shadow initialized to zeros; with constant input c the shadow after
    /// k updates is c * (1 - m^k), which the closed-form test pins down.
    pub fn from_zeros(params: &ParameterSet, momentum: f64) -> EmaShadow {
        let mut shadow = params.clone();
        for p in shadow.iter_mut() {
            p.tensor.data_mut().fill(0.0);
            p.tensor.set_grad(None);
        }
        EmaShadow { momentum, shadow }
    }

    pub fn update(&mut self, current: &ParameterSet) -> Result<()> {
        if current.len() != self.shadow.len() {
            return Err(Error::InvalidArg(format!(
                "EMA tracks {} parameters, got {}",
                self.shadow.len(),
                current.len()
            )));
        }
        let m = self.momentum;
        for (i, s) in self.shadow.iter_mut().enumerate() {
            let c = current.at(i);
            if s.name != c.name || s.tensor.shape() != c.tensor.shape() {
                return Err(Error::InvalidArg(format!(
                    "EMA mismatch at {i}: shadow {} {:?} vs current {} {:?}",
                    s.name,
                    s.tensor.shape(),
                    c.name,
                    c.tensor.shape()
                )));
            }
            for (sv, &cv) in s.tensor.data_mut().iter_mut().zip(c.tensor.data()) {
                *sv = m * *sv + (1.0 - m) * cv;
            }
        }
        Ok(())
    }

    /// The averaged weights as a parameter set (names and depths preserved),
    /// usable anywhere the raw set is.
    pub fn weights(&self) -> &ParameterSet {
        &self.shadow
    }
}

// ── training configuration ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseOrder {
    #[serde(rename = "v-first")]
    VFirst,
    #[serde(rename = "g-first")]
    GFirst,
}

impl std::fmt::Display for PhaseOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseOrder::VFirst => write!(f, "v-first"),
            PhaseOrder::GFirst => write!(f, "g-first"),
        }
    }
}

impl std::str::FromStr for PhaseOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<PhaseOrder> {
        match s {
            "v-first" => Ok(PhaseOrder::VFirst),
            "g-first" => Ok(PhaseOrder::GFirst),
            other => Err(Error::Config(format!(
                "phase order must be v-first or g-first, got {other:?}"
            ))),
        }
    }
}

/// Which data recipe a run uses: `Joint` trains both branches on real and
/// generated data, `Augdata` adds generated images without the latent
/// branch, `Finetune` uses real support images only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Joint,
    Augdata,
    Finetune,
}

impl std::fmt::Display for DataMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataMode::Joint => write!(f, "joint"),
            DataMode::Augdata => write!(f, "augdata"),
            DataMode::Finetune => write!(f, "finetune"),
        }
    }
}

impl std::str::FromStr for DataMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DataMode> {
        match s {
            "joint" => Ok(DataMode::Joint),
            "augdata" => Ok(DataMode::Augdata),
            "finetune" => Ok(DataMode::Finetune),
            other => Err(Error::Config(format!(
                "mode must be joint, augdata, or finetune, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the latent-branch loss on generated batches; the image
    /// branch gets 1 - alpha. 0 and 1 exclude the other branch entirely.
    pub alpha: f64,
    /// Label smoothing mass.
    pub epsilon: f64,
    /// Softmax temperature divisor.
    pub gamma: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Layer-wise lr decay per layer of distance from the probe.
    pub llrd_decay: f64,
    pub ema_momentum: f64,
    pub phase_order: PhaseOrder,
    /// When false the generated-data phase is skipped; the plain
    /// fine-tuning baseline.
    pub run_phase_g: bool,
    /// Test-set accuracy is measured every this many epochs (the last
    /// epoch always); 0 means final evaluation only. Purely observational,
    /// never feeds back into training.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            alpha: 0.5,
            epsilon: 0.1,
            gamma: 1.0,
            base_lr: 1e-4,
            weight_decay: 0.05,
            epochs: 40,
            batch_size: 64,
            llrd_decay: 0.7,
            ema_momentum: 0.9998,
            phase_order: PhaseOrder::VFirst,
            run_phase_g: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("train.alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("train.epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("train.gamma must be positive, got {}", self.gamma));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("train.base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.llrd_decay > 0.0 && self.llrd_decay <= 1.0) {
            return bad(format!(
                "train.llrd_decay must be in (0, 1], got {}",
                self.llrd_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!(
                "train.ema_momentum must be in [0, 1], got {}",
                self.ema_momentum
            ));
        }
        Ok(())
    }

    /// Very small support sets get double the epochs so the step count
    /// stays in a useful range.
    pub fn effective_epochs(&self, shots: usize) -> usize {
        if shots <= 2 {
            self.epochs * 2
        } else {
            self.epochs
        }
    }

    /// Batch never exceeds the support set; a 1-shot episode trains
    /// full-batch rather than erroring.
    pub fn effective_batch(&self, n_support: usize) -> usize {
        self.batch_size.min(n_support).max(1)
    }
}

// ── model bundle ────────────────────────────────────────────────────────

/// The four trainable components. The image pair is what ships (test-time
/// inference uses nothing else); the latent pair exists only to shape the
/// image encoder's training signal.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub image_enc: ImageEncoder,
    pub image_probe: LinearProbe,
    pub latent_enc: LatentEncoder,
    pub latent_probe: LinearProbe,
}

impl ModelBundle {
    pub fn new(n_classes: usize, seeds: &SeedSplitter) -> ModelBundle {
        let image_enc = ImageEncoder::new(ImageEncoderConfig::default(), &seeds.scope("image_enc"));
        let image_probe = LinearProbe::new(
            image_enc.feature_dim(),
            n_classes,
            image_enc.probe_depth(),
            &seeds.scope("image_probe"),
        );
        let latent_enc = LatentEncoder::new(LATENT_CHANNELS, &seeds.scope("latent_enc"));
        let latent_probe = LinearProbe::new(
            latent_enc.feature_dim(),
            n_classes,
            latent_enc.probe_depth(),
            &seeds.scope("latent_probe"),
        );
        ModelBundle {
            image_enc,
            image_probe,
            latent_enc,
            latent_probe,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.image_probe
            .params
            .get("w")
            .expect("probe has a weight matrix")
            .tensor
            .shape()[1]
    }
}

/// EMA shadows for every component, advanced in lockstep with optimizer
/// steps: a branch that takes no step gets no shadow update either.
#[derive(Debug, Clone)]
pub struct EmaBundle {
    pub image_enc: EmaShadow,
    pub image_probe: EmaShadow,
    pub latent_enc: EmaShadow,
    pub latent_probe: EmaShadow,
}

impl EmaBundle {
    pub fn new(models: &ModelBundle, momentum: f64) -> EmaBundle {
        EmaBundle {
            image_enc: EmaShadow::new(&models.image_enc.params, momentum),
            image_probe: EmaShadow::new(&models.image_probe.params, momentum),
            latent_enc: EmaShadow::new(&models.latent_enc.params, momentum),
            latent_probe: EmaShadow::new(&models.latent_probe.params, momentum),
        }
    }
}

// ── reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Mean real-data loss over the epoch's support batches.
    pub loss_v: f64,
    /// Mean image-branch loss on generated batches; absent when the phase
    /// did not run or alpha = 1 excluded the branch.
    pub loss_v_gen: Option<f64>,
    /// Mean latent-branch loss on generated batches; absent when the
    /// phase did not run or alpha = 0 excluded the branch.
    pub loss_latent: Option<f64>,
    /// Mean combined generated-phase loss.
    pub loss_g: Option<f64>,
    /// Base lr at the epoch's last optimizer step.
    pub lr: f64,
    pub acc_raw: Option<f64>,
    pub acc_ema: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub effective_epochs: usize,
    pub effective_batch: usize,
    pub total_steps: usize,
    pub final_raw: EvalResult,
    pub final_ema: EvalResult,
    /// Better of the two finals by top-1; ties prefer raw weights.
    pub best: EvalResult,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelBundle,
    pub ema: EmaBundle,
    pub report: TrainReport,
}

// ── engine ──────────────────────────────────────────────────────────────

struct OptSet {
    image_enc: AdamW,
    image_probe: AdamW,
    latent_enc: AdamW,
    latent_probe: AdamW,
}

impl OptSet {
    fn new(models: &ModelBundle) -> OptSet {
        OptSet {
            image_enc: AdamW::new(&models.image_enc.params),
            image_probe: AdamW::new(&models.image_probe.params),
            latent_enc: AdamW::new(&models.latent_enc.params),
            latent_probe: AdamW::new(&models.latent_probe.params),
        }
    }
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
    fn maybe_mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.mean())
    }
}

/// The generated-phase graph. Branch membership is decided by alpha alone:
/// at the endpoints the excluded branch is left out of the graph entirely,
/// so its parameters see no gradients and, downstream, no optimizer or EMA
/// movement. Both losses share one tape so one backward pass serves both.
struct GenGraph {
    loss: Var,
    image: Option<(Var, Bound, Bound)>,
    latent: Option<(Var, Bound, Bound)>,
}

fn build_gen_graph(
    tape: &mut Tape,
    models: &ModelBundle,
    images: &Tensor,
    latents: &Tensor,
    targets: &[usize],
    alpha: f64,
    epsilon: f64,
    gamma: f64,
) -> Result<GenGraph> {
    let mut image = None;
    let mut latent = None;
    if alpha < 1.0 {
        let be = models.image_enc.params.bind(tape);
        let bp = models.image_probe.params.bind(tape);
        let xv = tape.leaf(images.shape(), images.data().to_vec(), false)?;
        let feats = models.image_enc.forward(tape, &be, xv)?;
        let logits = models.image_probe.forward(tape, &bp, feats)?;
        let l = tape.smoothed_ce(logits, targets, epsilon, gamma)?;
        image = Some((l, be, bp));
    }
    if alpha > 0.0 {
        let bl = models.latent_enc.params.bind(tape);
        let blp = models.latent_probe.params.bind(tape);
        let zv = tape.leaf(latents.shape(), latents.data().to_vec(), false)?;
        let feats = models.latent_enc.forward(tape, &bl, zv)?;
        let logits = models.latent_probe.forward(tape, &blp, feats)?;
        let l = tape.smoothed_ce(logits, targets, epsilon, gamma)?;
        latent = Some((l, bl, blp));
    }
    let loss = match (&latent, &image) {
        (Some((ll, ..)), Some((lv, ..))) => {
            let a = tape.scale(*ll, alpha)?;
            let b = tape.scale(*lv, 1.0 - alpha)?;
            tape.add(a, b)?
        }
        (Some((ll, ..)), None) => *ll,
        (None, Some((lv, ..))) => *lv,
        (None, None) => unreachable!("alpha in [0, 1] always keeps one branch"),
    };
    Ok(GenGraph { loss, image, latent })
}

struct Engine<'a> {
    cfg: &'a TrainConfig,
    models: ModelBundle,
    opt: OptSet,
    ema: EmaBundle,
    img_max: usize,
    lat_max: usize,
    total_steps: usize,
    step: usize,
    last_lr: f64,
}

impl Engine<'_> {
    /// Base lr for the step about to happen; advances the global counter.
    fn advance(&mut self) -> Result<f64> {
        let lr = cosine_lr(self.step, self.total_steps, self.cfg.base_lr)?;
        self.last_lr = lr;
        self.step += 1;
        Ok(lr)
    }

    fn step_image(&mut self, lr_now: f64) -> Result<()> {
        let (max, decay, wd) = (self.img_max, self.cfg.llrd_decay, self.cfg.weight_decay);
        let lr_for = move |p: &Param| lr_now * llrd_scale(p.depth, max, decay);
        self.opt
            .image_enc
            .step(&mut self.models.image_enc.params, &lr_for, wd);
        self.opt
            .image_probe
            .step(&mut self.models.image_probe.params, &lr_for, wd);
        clear_grads(&mut self.models.image_enc.params);
        clear_grads(&mut self.models.image_probe.params);
        self.ema.image_enc.update(&self.models.image_enc.params)?;
        self.ema.image_probe.update(&self.models.image_probe.params)?;
        Ok(())
    }

    fn step_latent(&mut self, lr_now: f64) -> Result<()> {
        let (max, decay, wd) = (self.lat_max, self.cfg.llrd_decay, self.cfg.weight_decay);
        let lr_for = move |p: &Param| lr_now * llrd_scale(p.depth, max, decay);
        self.opt
            .latent_enc
            .step(&mut self.models.latent_enc.params, &lr_for, wd);
        self.opt
            .latent_probe
            .step(&mut self.models.latent_probe.params, &lr_for, wd);
        clear_grads(&mut self.models.latent_enc.params);
        clear_grads(&mut self.models.latent_probe.params);
        self.ema.latent_enc.update(&self.models.latent_enc.params)?;
        self.ema.latent_probe.update(&self.models.latent_probe.params)?;
        Ok(())
    }

    fn phase_v_step(
        &mut self,
        x: &Tensor,
        targets: &[usize],
        epoch: usize,
        step_in_phase: usize,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let be = self.models.image_enc.params.bind(&mut tape);
        let bp = self.models.image_probe.params.bind(&mut tape);
        let xv = tape.leaf(x.shape(), x.data().to_vec(), false)?;
        let feats = self.models.image_enc.forward(&mut tape, &be, xv)?;
        let logits = self.models.image_probe.forward(&mut tape, &bp, feats)?;
        let lvar = tape.smoothed_ce(logits, targets, self.cfg.epsilon, self.cfg.gamma)?;
        let loss = tape.scalar(lvar);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                phase: "V",
                step: step_in_phase,
            });
        }
        tape.backward(lvar)?;
        self.models.image_enc.params.harvest(&tape, &be);
        self.models.image_probe.params.harvest(&tape, &bp);
        let lr = self.advance()?;
        self.step_image(lr)?;
        Ok(loss)
    }

    /// One generated-data batch: both branch losses on one tape, one
    /// backward, then each included branch takes its optimizer step under
    /// the same global lr.
    fn phase_g_step(
        &mut self,
        images: &Tensor,
        latents: &Tensor,
        targets: &[usize],
        epoch: usize,
        step_in_phase: usize,
    ) -> Result<(f64, Option<f64>, Option<f64>)> {
        let cfg = self.cfg;
        let mut tape = Tape::new();
        let g = build_gen_graph(
            &mut tape,
            &self.models,
            images,
            latents,
            targets,
            cfg.alpha,
            cfg.epsilon,
            cfg.gamma,
        )?;
        let loss = tape.scalar(g.loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                phase: "G",
                step: step_in_phase,
            });
        }
        let l_image = g.image.as_ref().map(|(v, ..)| tape.scalar(*v));
        let l_latent = g.latent.as_ref().map(|(v, ..)| tape.scalar(*v));
        tape.backward(g.loss)?;
        if let Some((_, be, bp)) = &g.image {
            self.models.image_enc.params.harvest(&tape, be);
            self.models.image_probe.params.harvest(&tape, bp);
        }
        if let Some((_, bl, blp)) = &g.latent {
            self.models.latent_enc.params.harvest(&tape, bl);
            self.models.latent_probe.params.harvest(&tape, blp);
        }
        let lr = self.advance()?;
        if g.image.is_some() {
            self.step_image(lr)?;
        }
        if g.latent.is_some() {
            self.step_latent(lr)?;
        }
        Ok((loss, l_image, l_latent))
    }

    fn eval_pair(&self, images: &[Tensor], labels: &[usize]) -> Result<(EvalResult, EvalResult)> {
        let raw = evaluate(
            &self.models.image_enc,
            &self.models.image_probe,
            &self.models.image_enc.params,
            &self.models.image_probe.params,
            images,
            labels,
            self.cfg.gamma,
            WeightsUsed::Raw,
        )?;
        let ema = evaluate(
            &self.models.image_enc,
            &self.models.image_probe,
            self.ema.image_enc.weights(),
            self.ema.image_probe.weights(),
            images,
            labels,
            self.cfg.gamma,
            WeightsUsed::Ema,
        )?;
        Ok((raw, ema))
    }
}

fn run_phase_v(
    eng: &mut Engine,
    episode: &Episode,
    batch: usize,
    stream: &SeedSplitter,
    epoch: usize,
    acc: &mut MeanAcc,
) -> Result<()> {
    let mut rng = stream.rng_at("epoch", epoch as u64);
    let mut order: Vec<usize> = (0..episode.support_images.len()).collect();
    order.shuffle(&mut rng);
    for (i, chunk) in order.chunks(batch).enumerate() {
        let refs: Vec<&Tensor> = chunk.iter().map(|&j| &episode.support_images[j]).collect();
        let x = Tensor::stack(&refs)?;
        let targets: Vec<usize> = chunk.iter().map(|&j| episode.support_labels[j]).collect();
        acc.push(eng.phase_v_step(&x, &targets, epoch, i)?);
    }
    Ok(())
}

fn run_phase_g(
    eng: &mut Engine,
    episode: &Episode,
    batch: usize,
    stream: &SeedSplitter,
    epoch: usize,
    acc_g: &mut MeanAcc,
    acc_image: &mut MeanAcc,
    acc_latent: &mut MeanAcc,
) -> Result<()> {
    let mut rng = stream.rng_at("epoch", epoch as u64);
    let mut order: Vec<usize> = (0..episode.gen_images.len()).collect();
    order.shuffle(&mut rng);
    for (i, chunk) in order.chunks(batch).enumerate() {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&j| &episode.gen_images[j]).collect();
        let lats: Vec<&Tensor> = chunk.iter().map(|&j| &episode.latents[j]).collect();
        let x = Tensor::stack(&imgs)?;
        let z = Tensor::stack(&lats)?;
        let targets: Vec<usize> = chunk.iter().map(|&j| episode.gen_labels[j]).collect();
        let (lg, li, ll) = eng.phase_g_step(&x, &z, &targets, epoch, i)?;
        acc_g.push(lg);
        if let Some(v) = li {
            acc_image.push(v);
        }
        if let Some(v) = ll {
            acc_latent.push(v);
        }
    }
    Ok(())
}

/// Joint training over one episode. Per epoch, a real-data phase updates
/// the image branch and (when enabled) a generated-data phase updates both
/// branches through an alpha-weighted combined loss; the order of the two
/// phases is configurable. Every optimizer step consumes one tick of a
/// single cosine schedule spanning all steps of all epochs. Caller builds
/// the models, so experiments can share one initialization across recipes.
pub fn train_joint(
    episode: &Episode,
    eval_images: &[Tensor],
    eval_labels: &[usize],
    models: ModelBundle,
    cfg: &TrainConfig,
    seeds: &SeedSplitter,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_sup = episode.support_images.len();
    if n_sup == 0 {
        return Err(Error::InvalidArg("train: empty support set".into()));
    }
    if eval_images.is_empty() || eval_images.len() != eval_labels.len() {
        return Err(Error::InvalidArg(format!(
            "train: bad evaluation split ({} images, {} labels)",
            eval_images.len(),
            eval_labels.len()
        )));
    }
    let probe_n = models.n_classes();
    if probe_n != episode.n_classes {
        return Err(Error::InvalidArg(format!(
            "train: probe built for {probe_n} classes, episode has {}",
            episode.n_classes
        )));
    }
    let run_g = cfg.run_phase_g;
    let n_gen = episode.gen_images.len();
    if run_g && n_gen == 0 {
        return Err(Error::InvalidArg(
            "train: generated phase enabled but episode has no generated data".into(),
        ));
    }

    let epochs = cfg.effective_epochs(episode.shots);
    let batch = cfg.effective_batch(n_sup);
    let v_steps = n_sup.div_ceil(batch);
    let g_steps = if run_g { n_gen.div_ceil(batch) } else { 0 };
    let total_steps = epochs * (v_steps + g_steps);

    let mut eng = Engine {
        img_max: models.image_enc.probe_depth(),
        lat_max: models.latent_enc.probe_depth(),
        opt: OptSet::new(&models),
        ema: EmaBundle::new(&models, cfg.ema_momentum),
        models,
        cfg,
        total_steps,
        step: 0,
        last_lr: cfg.base_lr,
    };

    let sv = seeds.scope("phase_v");
    let sg = seeds.scope("phase_g");
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut vacc = MeanAcc::default();
        let mut gacc = MeanAcc::default();
        let mut giacc = MeanAcc::default();
        let mut glacc = MeanAcc::default();
        match cfg.phase_order {
            PhaseOrder::VFirst => {
                run_phase_v(&mut eng, episode, batch, &sv, epoch, &mut vacc)?;
                if run_g {
                    run_phase_g(&mut eng, episode, batch, &sg, epoch, &mut gacc, &mut giacc, &mut glacc)?;
                }
            }
            PhaseOrder::GFirst => {
                if run_g {
                    run_phase_g(&mut eng, episode, batch, &sg, epoch, &mut gacc, &mut giacc, &mut glacc)?;
                }
                run_phase_v(&mut eng, episode, batch, &sv, epoch, &mut vacc)?;
            }
        }
        let measure = match cfg.eval_every {
            0 => false,
            n => epoch % n == 0 || epoch + 1 == epochs,
        };
        let (acc_raw, acc_ema) = if measure {
            let (r, e) = eng.eval_pair(eval_images, eval_labels)?;
            (Some(r.top1), Some(e.top1))
        } else {
            (None, None)
        };
        records.push(EpochRecord {
            loss_v: vacc.mean(),
            loss_v_gen: giacc.maybe_mean(),
            loss_latent: glacc.maybe_mean(),
            loss_g: gacc.maybe_mean(),
            lr: eng.last_lr,
            acc_raw,
            acc_ema,
        });
    }
    debug_assert_eq!(eng.step, total_steps);
    let (final_raw, final_ema) = eng.eval_pair(eval_images, eval_labels)?;
    let best = better(final_raw.clone(), final_ema.clone());
    Ok(TrainOutcome {
        models: eng.models,
        ema: eng.ema,
        report: TrainReport {
            epochs: records,
            effective_epochs: epochs,
            effective_batch: batch,
            total_steps,
            final_raw,
            final_ema,
            best,
        },
    })
}

/// The two baselines, expressed through the same engine so any difference
/// from joint training is the recipe and nothing else. With generated
/// data the generated phase runs but alpha is forced to 0 (latent branch
/// excluded); without, the generated phase is skipped entirely.
pub fn train_baseline_finetune(
    episode: &Episode,
    eval_images: &[Tensor],
    eval_labels: &[usize],
    models: ModelBundle,
    cfg: &TrainConfig,
    seeds: &SeedSplitter,
    use_generated: bool,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if use_generated {
        cfg.alpha = 0.0;
        cfg.run_phase_g = true;
    } else {
        cfg.run_phase_g = false;
    }
    train_joint(episode, eval_images, eval_labels, models, &cfg, seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenBatchProbe {
    pub loss: f64,
    pub loss_image: Option<f64>,
    pub loss_latent: Option<f64>,
}

/// Builds exactly the generated-phase graph the engine trains on, runs one
/// backward pass, and leaves the harvested gradients on the bundle's
/// parameters for inspection. A branch excluded by alpha ends with no
/// gradient at all (there is no path to it). Optimizer state is not
/// involved; this exists so the loss routing is externally checkable.
pub fn probe_generated_gradients(
    models: &mut ModelBundle,
    images: &[Tensor],
    latents: &[Tensor],
    labels: &[usize],
    alpha: f64,
    epsilon: f64,
    gamma: f64,
) -> Result<GenBatchProbe> {
    if images.is_empty() || images.len() != latents.len() || images.len() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "gradient probe: {} images, {} latents, {} labels",
            images.len(),
            latents.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let xr: Vec<&Tensor> = images.iter().collect();
    let zr: Vec<&Tensor> = latents.iter().collect();
    let x = Tensor::stack(&xr)?;
    let z = Tensor::stack(&zr)?;
    let mut tape = Tape::new();
    let g = build_gen_graph(&mut tape, models, &x, &z, labels, alpha, epsilon, gamma)?;
    let loss = tape.scalar(g.loss);
    let loss_image = g.image.as_ref().map(|(v, ..)| tape.scalar(*v));
    let loss_latent = g.latent.as_ref().map(|(v, ..)| tape.scalar(*v));
    tape.backward(g.loss)?;
    if let Some((_, be, bp)) = &g.image {
        models.image_enc.params.harvest(&tape, be);
        models.image_probe.params.harvest(&tape, bp);
    }
    if let Some((_, bl, blp)) = &g.latent {
        models.latent_enc.params.harvest(&tape, bl);
        models.latent_probe.params.harvest(&tape, blp);
    }
    Ok(GenBatchProbe {
        loss,
        loss_image,
        loss_latent,
    })
}

/// One self-contained run: sample an episode, build fresh models, train
/// with the given recipe. Everything is a pure function of `seed`, which
/// drives three named streams (episode draw, initialization, training),
/// so paired-seed comparisons across modes share episode and init exactly.
pub fn run_mode(
    ds: &SyntheticDataset,
    cache: &GenerationCache,
    mode: DataMode,
    cfg: &TrainConfig,
    shots: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let split = SeedSplitter::new(seed);
    let episode = sample_episode(ds, cache, shots, &split.scope("episode"), false)?;
    let models = ModelBundle::new(ds.cfg.n_classes, &split.scope("models"));
    let t = split.scope("train");
    let (i, l) = (&ds.test.images, &ds.test.labels);
    match mode {
        DataMode::Joint => train_joint(&episode, i, l, models, cfg, &t),
        DataMode::Augdata => train_baseline_finetune(&episode, i, l, models, cfg, &t, true),
        DataMode::Finetune => train_baseline_finetune(&episode, i, l, models, cfg, &t, false),
    }
}
