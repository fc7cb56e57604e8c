//! Config-file driven front end.
//!
//! One flat `key = value` config file with `[sections]` feeds every
//! command; unknown sections or keys are rejected with their line number.
//! Commands are idempotent: artifacts are written atomically, reruns with
//! identical inputs reproduce identical bytes, and a command either
//! completes or fails before touching its outputs. Artifact dependencies
//! are explicit: a missing upstream artifact names the command that
//! produces it.
//!
//! Layout under the output root (`[run] out_root`, or the env var named by
//! [`OUT_ENV`]): `data/` dataset manifest, `cache/` generation cache +
//! generative-stack checkpoints, `ckpt/` encoder/probe checkpoints,
//! `reports/` JSON reports, text report, and `reports/ablations/` grids.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_dataset, DataConfig, DatasetManifest, SyntheticDataset};
use crate::diffusion::{
    build_generation_cache, cache_exists, load_cache, save_cache, DiffusionConfig, GenerationCache,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_data_mode, ablate_shots, ablate_stage_order, better, evaluate, render_grid_table,
    sweep_latent_factor, write_grid, AblationContext, AblationGrid, EvalResult, WeightsUsed,
};
use crate::fsio;
use crate::nn::{load_entries, save_entries, ImageEncoder, ImageEncoderConfig, LinearProbe};
use crate::presets::{self, ALPHA_SWEEP, SHOT_SWEEP};
use crate::seeds::SeedSplitter;
use crate::train::{run_mode, DataMode, TrainConfig, TrainReport};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "JOLT_OUT";

// ── run configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Root seed; every stage derives its own named stream from it.
    pub seed: u64,
    pub out_root: PathBuf,
    pub shots: usize,
    /// Worker threads for ablation cells.
    pub jobs: usize,
    /// Training recipe for `train` and the shot sweep.
    pub mode: DataMode,
    /// Paired seeds for ablation cells.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Documented defaults, with the output root taken from the
    /// environment when set.
    pub fn default_with_env() -> RunConfig {
        let setup = presets::desk_default();
        let out_root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("jolt_out"));
        RunConfig {
            seed: setup.seed,
            out_root,
            shots: setup.shots,
            jobs: 1,
            mode: DataMode::Joint,
            seeds: setup.seeds,
            data: setup.data,
            diffusion: setup.diffusion,
            train: setup.train,
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default_with_env();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Applies a config file on top of the current values. Unknown
    /// sections and keys are errors, not warnings: a typo must not
    /// silently fall back to a default.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw_line.trim(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "run" | "data" | "diffusion" | "train") {
                    return Err(Error::Config(format!(
                        "{}:{lineno}: unknown section [{name}]",
                        path.display()
                    )));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{lineno}: expected `key = value`, got {line:?}",
                    path.display()
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "{}:{lineno}: key {key:?} before any [section]",
                    path.display()
                )));
            }
            self.set(&section, key, value)
                .map_err(|e| Error::Config(format!("{}:{lineno}: {e}", path.display())))?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
            raw.parse().map_err(|_| {
                Error::Config(format!("{section}.{key}: cannot parse {raw:?}"))
            })
        }
        let unknown = || {
            Err(Error::Config(format!(
                "unknown key {section}.{key} (sections: run, data, diffusion, train)"
            )))
        };
        match section {
            "run" => match key {
                "seed" => self.seed = num(section, key, raw)?,
                "out_root" => self.out_root = PathBuf::from(raw),
                "shots" => self.shots = num(section, key, raw)?,
                "jobs" => self.jobs = num(section, key, raw)?,
                "mode" => self.mode = raw.parse()?,
                "seeds" => {
                    let mut seeds = Vec::new();
                    for part in raw.split(',') {
                        seeds.push(num::<u64>(section, key, part.trim())?);
                    }
                    self.seeds = seeds;
                }
                _ => return unknown(),
            },
            "data" => match key {
                "n_classes" => self.data.n_classes = num(section, key, raw)?,
                "train_per_class" => self.data.train_per_class = num(section, key, raw)?,
                "test_per_class" => self.data.test_per_class = num(section, key, raw)?,
                "pool_per_class" => self.data.pool_per_class = num(section, key, raw)?,
                "noise" => self.data.noise = num(section, key, raw)?,
                "color_jitter" => self.data.color_jitter = num(section, key, raw)?,
                _ => return unknown(),
            },
            "diffusion" => match key {
                "t_steps" => self.diffusion.t_steps = num(section, key, raw)?,
                "beta_start" => self.diffusion.beta_start = num(section, key, raw)?,
                "beta_end" => self.diffusion.beta_end = num(section, key, raw)?,
                "ae_epochs" => self.diffusion.ae_epochs = num(section, key, raw)?,
                "ae_lr" => self.diffusion.ae_lr = num(section, key, raw)?,
                "ae_batch" => self.diffusion.ae_batch = num(section, key, raw)?,
                "denoiser_epochs" => self.diffusion.denoiser_epochs = num(section, key, raw)?,
                "denoiser_lr" => self.diffusion.denoiser_lr = num(section, key, raw)?,
                "denoiser_batch" => self.diffusion.denoiser_batch = num(section, key, raw)?,
                "denoiser_hidden" => self.diffusion.denoiser_hidden = num(section, key, raw)?,
                "records_per_class" => self.diffusion.records_per_class = num(section, key, raw)?,
                "gen_batch" => self.diffusion.gen_batch = num(section, key, raw)?,
                _ => return unknown(),
            },
            "train" => match key {
                "alpha" => self.train.alpha = num(section, key, raw)?,
                "epsilon" => self.train.epsilon = num(section, key, raw)?,
                "gamma" => self.train.gamma = num(section, key, raw)?,
                "base_lr" => self.train.base_lr = num(section, key, raw)?,
                "weight_decay" => self.train.weight_decay = num(section, key, raw)?,
                "epochs" => self.train.epochs = num(section, key, raw)?,
                "batch_size" => self.train.batch_size = num(section, key, raw)?,
                "llrd_decay" => self.train.llrd_decay = num(section, key, raw)?,
                "ema_momentum" => self.train.ema_momentum = num(section, key, raw)?,
                "phase_order" => self.train.phase_order = raw.parse()?,
                "run_phase_g" => {
                    self.train.run_phase_g = match raw {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(Error::Config(format!(
                                "train.run_phase_g: expected true or false, got {raw:?}"
                            )))
                        }
                    }
                }
                "eval_every" => self.train.eval_every = num(section, key, raw)?,
                _ => return unknown(),
            },
            _ => return unknown(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.shots == 0 {
            return Err(Error::Config("run.shots must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("run.jobs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_root.join("data")
    }
    pub fn cache_dir(&self) -> PathBuf {
        self.out_root.join("cache")
    }
    pub fn ckpt_dir(&self) -> PathBuf {
        self.out_root.join("ckpt")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out_root.join("reports")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.report_dir().join("ablations")
    }

    fn dataset_manifest_path(&self) -> PathBuf {
        self.data_dir().join("dataset.json")
    }

    /// The manifest this config would produce; comparing against the one
    /// on disk detects parameter drift between commands.
    fn expected_manifest(&self) -> Result<(SyntheticDataset, DatasetManifest)> {
        let seed = SeedSplitter::new(self.seed).stream("dataset");
        let ds = make_synthetic_dataset(&self.data, seed)?;
        let manifest = DatasetManifest {
            cfg: self.data.clone(),
            seed,
            content_hash: ds.content_hash(),
        };
        Ok((ds, manifest))
    }
}

/// Rebuilds the dataset from the on-disk manifest, verifying both that
/// the stored hash still reproduces (generator drift) and that the
/// current config agrees with what was generated (parameter drift).
pub fn load_dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let path = cfg.dataset_manifest_path();
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            what: format!("dataset manifest {}", path.display()),
            producer: "gen-data",
        });
    }
    let stored: DatasetManifest = fsio::read_json(&path)?;
    let (ds, expected) = cfg.expected_manifest()?;
    if stored != expected {
        return Err(Error::Config(format!(
            "dataset at {} was generated with different parameters or seed; \
             rerun `jolt gen-data --force` with the current config",
            path.display()
        )));
    }
    Ok(ds)
}

fn load_cache_checked(cfg: &RunConfig) -> Result<GenerationCache> {
    let (cache, _stack, built_with) = load_cache(&cfg.cache_dir())?;
    if built_with != cfg.diffusion {
        return Err(Error::Config(format!(
            "generation cache at {} was built with different diffusion parameters; \
             rerun `jolt build-cache --force` with the current config",
            cfg.cache_dir().display()
        )));
    }
    Ok(cache)
}

// ── commands ────────────────────────────────────────────────────────────

/// Builds the synthetic dataset and persists its manifest. The dataset is
/// cheap to regenerate, so the manifest (parameters, derived seed, content
/// hash) is the artifact of record.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<String> {
    let (ds, manifest) = cfg.expected_manifest()?;
    let path = cfg.dataset_manifest_path();
    if path.is_file() {
        let stored: DatasetManifest = fsio::read_json(&path)?;
        if stored == manifest {
            return Ok(format!("dataset up to date at {}", path.display()));
        }
        if !force {
            return Err(Error::Config(format!(
                "dataset manifest {} exists with different parameters; pass --force to replace",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(cfg.data_dir()).map_err(|e| Error::io(cfg.data_dir(), e))?;
    fsio::write_json_atomic(&path, &manifest)?;
    Ok(format!(
        "dataset: {} classes x {}/{}/{} train/test/pool, noise {}, content hash {:#018x}\nmanifest: {}",
        ds.cfg.n_classes,
        ds.cfg.train_per_class,
        ds.cfg.test_per_class,
        ds.cfg.pool_per_class,
        ds.cfg.noise,
        ds.content_hash(),
        path.display()
    ))
}

/// Trains the autoencoder + denoiser on the dataset's pool split and
/// samples the per-class record cache. A present cache is left alone
/// unless forced.
pub fn cmd_build_cache(cfg: &RunConfig, force: bool) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.cache_dir();
    if cache_exists(&dir) && !force {
        return Ok(format!(
            "cache already present at {}; pass --force to rebuild",
            dir.display()
        ));
    }
    let seeds = SeedSplitter::new(cfg.seed).scope("diffusion");
    let (cache, stack, report) = build_generation_cache(&ds, &cfg.diffusion, &seeds)?;
    save_cache(&dir, &cache, &stack, &cfg.diffusion)?;
    Ok(format!(
        "cache: {} classes x {} records at {}\nautoencoder mse {:.4}; denoiser val mse {:.4} (untrained {:.4})",
        cache.n_classes(),
        cfg.diffusion.records_per_class,
        dir.display(),
        report.ae.final_mse,
        report.denoiser.final_val_mse,
        report.denoiser.untrained_val_mse,
    ))
}

/// What `train` persists next to the checkpoints: enough context to read
/// the report without the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunSummary {
    pub mode: DataMode,
    pub shots: usize,
    pub seed: u64,
    pub report: TrainReport,
}

/// Runs one training job and writes the image-branch checkpoints (raw and
/// EMA) plus the training report. The latent branch is training
/// scaffolding and is not part of the shipped artifact.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let cache = load_cache_checked(cfg)?;
    let outcome = run_mode(&ds, &cache, cfg.mode, &cfg.train, cfg.shots, cfg.seed)?;
    let ck = cfg.ckpt_dir();
    std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    save_entries(
        &ck.join("image_enc.ckpt"),
        &outcome.models.image_enc.params.entries("image_enc"),
    )?;
    save_entries(
        &ck.join("image_probe.ckpt"),
        &outcome.models.image_probe.params.entries("image_probe"),
    )?;
    save_entries(
        &ck.join("image_enc_ema.ckpt"),
        &outcome.ema.image_enc.weights().entries("image_enc"),
    )?;
    save_entries(
        &ck.join("image_probe_ema.ckpt"),
        &outcome.ema.image_probe.weights().entries("image_probe"),
    )?;
    let summary = TrainRunSummary {
        mode: cfg.mode,
        shots: cfg.shots,
        seed: cfg.seed,
        report: outcome.report,
    };
    std::fs::create_dir_all(cfg.report_dir()).map_err(|e| Error::io(cfg.report_dir(), e))?;
    fsio::write_json_atomic(&cfg.report_dir().join("train_report.json"), &summary)?;
    let r = &summary.report;
    Ok(format!(
        "train[{}] {}-shot seed {}: {} epochs, {} steps\nfinal top1: raw {:.4}, ema {:.4}, best {:.4} ({})\ncheckpoints: {}",
        summary.mode,
        summary.shots,
        summary.seed,
        r.effective_epochs,
        r.total_steps,
        r.final_raw.top1,
        r.final_ema.top1,
        r.best.top1,
        r.best.weights_used,
        ck.display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub raw: EvalResult,
    pub ema: Option<EvalResult>,
    pub best: EvalResult,
}

/// Scores the saved checkpoints on the test split. Raw weights are
/// required; EMA weights are scored when their checkpoints exist. The
/// summary is only written after every read and forward pass succeeded,
/// so a corrupt checkpoint cannot leave a half-written report behind.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let ck = cfg.ckpt_dir();
    let enc_path = ck.join("image_enc.ckpt");
    if !enc_path.is_file() {
        return Err(Error::MissingArtifact {
            what: format!("checkpoint {}", enc_path.display()),
            producer: "train",
        });
    }
    let dummy = SeedSplitter::new(0);
    let mut enc = ImageEncoder::new(ImageEncoderConfig::default(), &dummy.scope("enc"));
    enc.params
        .load_from_entries("image_enc", &load_entries(&enc_path)?)?;
    let mut probe = LinearProbe::new(
        enc.feature_dim(),
        ds.cfg.n_classes,
        enc.probe_depth(),
        &dummy.scope("probe"),
    );
    probe
        .params
        .load_from_entries("image_probe", &load_entries(&ck.join("image_probe.ckpt"))?)?;
    let raw = evaluate(
        &enc,
        &probe,
        &enc.params,
        &probe.params,
        &ds.test.images,
        &ds.test.labels,
        cfg.train.gamma,
        WeightsUsed::Raw,
    )?;
    let ema_enc_path = ck.join("image_enc_ema.ckpt");
    let ema = if ema_enc_path.is_file() {
        let mut enc_ema = ImageEncoder::new(ImageEncoderConfig::default(), &dummy.scope("enc"));
        enc_ema
            .params
            .load_from_entries("image_enc", &load_entries(&ema_enc_path)?)?;
        let mut probe_ema = LinearProbe::new(
            enc.feature_dim(),
            ds.cfg.n_classes,
            enc.probe_depth(),
            &dummy.scope("probe"),
        );
        probe_ema.params.load_from_entries(
            "image_probe",
            &load_entries(&ck.join("image_probe_ema.ckpt"))?,
        )?;
        Some(evaluate(
            &enc_ema,
            &probe_ema,
            &enc_ema.params,
            &probe_ema.params,
            &ds.test.images,
            &ds.test.labels,
            cfg.train.gamma,
            WeightsUsed::Ema,
        )?)
    } else {
        None
    };
    let best = match &ema {
        Some(e) => better(raw.clone(), e.clone()),
        None => raw.clone(),
    };
    let summary = EvalSummary { raw, ema, best };
    std::fs::create_dir_all(cfg.report_dir()).map_err(|e| Error::io(cfg.report_dir(), e))?;
    fsio::write_json_atomic(&cfg.report_dir().join("eval.json"), &summary)?;
    Ok(render_eval(&summary))
}

fn render_eval(s: &EvalSummary) -> String {
    let mut out = format!(
        "eval on {} test images\n  raw  top1 {:.4}  top5 {:.4}\n",
        s.raw.n_test, s.raw.top1, s.raw.top5
    );
    if let Some(e) = &s.ema {
        out.push_str(&format!("  ema  top1 {:.4}  top5 {:.4}\n", e.top1, e.top5));
    }
    out.push_str(&format!(
        "  best top1 {:.4} ({})",
        s.best.top1, s.best.weights_used
    ));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Data,
    Order,
    Shots,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "data" => Ok(Axis::Data),
            "order" => Ok(Axis::Order),
            "shots" => Ok(Axis::Shots),
            other => Err(Error::Config(format!(
                "axis must be alpha, data, order, or shots, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Alpha => write!(f, "alpha"),
            Axis::Data => write!(f, "data"),
            Axis::Order => write!(f, "order"),
            Axis::Shots => write!(f, "shots"),
        }
    }
}

/// Runs one ablation axis over the configured seeds and writes stamped +
/// `_latest` CSV/JSON grids. Cells run on a worker pool of `run.jobs`
/// threads; a failed cell is recorded in the grid, not fatal.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let cache = load_cache_checked(cfg)?;
    let ctx = AblationContext {
        ds: &ds,
        cache: &cache,
        cfg: &cfg.train,
        seeds: cfg.seeds.clone(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let grid = pool.install(|| match axis {
        Axis::Alpha => sweep_latent_factor(&ctx, &ALPHA_SWEEP, cfg.shots),
        Axis::Data => ablate_data_mode(&ctx, &SHOT_SWEEP),
        Axis::Order => ablate_stage_order(&ctx, &SHOT_SWEEP),
        Axis::Shots => ablate_shots(&ctx, &SHOT_SWEEP, cfg.mode),
    });
    let stamp = fsio::utc_stamp(
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    );
    let written = write_grid(&grid, &cfg.ablation_dir(), &stamp)?;
    let mut out = render_grid_table(&grid);
    out.push_str(&format!(
        "artifacts: {}\n",
        written
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    Ok(out)
}

/// Renders everything present under the report dir into one aligned text
/// report (stdout and `reports/report.txt`). Sections with no artifact
/// are listed as not run; a completely empty report dir is an error
/// pointing at the first producer.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let rd = cfg.report_dir();
    let mut sections: Vec<String> = Vec::new();
    let mut found = false;

    let train_path = rd.join("train_report.json");
    if train_path.is_file() {
        let s: TrainRunSummary = fsio::read_json(&train_path)?;
        found = true;
        let r = &s.report;
        sections.push(format!(
            "== training ==\nmode {}  shots {}  seed {}\nepochs {}  steps {}  batch {}\nfinal top1: raw {:.4}  ema {:.4}  best {:.4} ({})\n",
            s.mode,
            s.shots,
            s.seed,
            r.effective_epochs,
            r.total_steps,
            r.effective_batch,
            r.final_raw.top1,
            r.final_ema.top1,
            r.best.top1,
            r.best.weights_used
        ));
    } else {
        sections.push("== training ==\n(not run)\n".into());
    }

    let eval_path = rd.join("eval.json");
    if eval_path.is_file() {
        let s: EvalSummary = fsio::read_json(&eval_path)?;
        found = true;
        sections.push(format!("== evaluation ==\n{}\n", render_eval(&s)));
    } else {
        sections.push("== evaluation ==\n(not run)\n".into());
    }

    for axis in [Axis::Alpha, Axis::Data, Axis::Order, Axis::Shots] {
        let path = cfg.ablation_dir().join(format!("{axis}_latest.json"));
        if path.is_file() {
            let grid: AblationGrid = fsio::read_json(&path)?;
            found = true;
            sections.push(format!("== ablation: {axis} ==\n{}", render_grid_table(&grid)));
        } else {
            sections.push(format!("== ablation: {axis} ==\n(not run)\n"));
        }
    }

    if !found {
        return Err(Error::MissingArtifact {
            what: format!("no report artifacts under {}", rd.display()),
            producer: "train",
        });
    }
    let text = sections.join("\n");
    std::fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
    fsio::write_atomic(&rd.join("report.txt"), text.as_bytes())?;
    Ok(text)
}

// ── argument parsing and dispatch ───────────────────────────────────────

#[derive(clap::Parser, Debug)]
#[command(
    name = "jolt",
    version,
    about = "Few-shot training workbench: synthetic data, toy latent diffusion, joint encoder training"
)]
pub struct Args {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(clap::Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// Config file (flat key = value with [run]/[data]/[diffusion]/[train] sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the support size.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Override the latent loss factor.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Worker threads for ablation cells.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Rebuild artifacts that already exist.
    #[arg(long)]
    pub force: bool,
}

#[derive(clap::Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic dataset and write its manifest.
    GenData(CommonArgs),
    /// Train the generative stack and populate the generation cache.
    BuildCache(CommonArgs),
    /// Train encoders on one sampled episode; write checkpoints + report.
    Train(CommonArgs),
    /// Score the saved checkpoints on the test split.
    Eval(CommonArgs),
    /// Sweep one axis over the configured seeds; emit CSV/JSON grids.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// alpha | data | order | shots
        #[arg(long)]
        axis: String,
    },
    /// Render all present artifacts into one text report.
    Report(CommonArgs),
}

fn resolve(c: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default_with_env(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = c.shots {
        cfg.shots = k;
    }
    if let Some(a) = c.alpha {
        cfg.train.alpha = a;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes one parsed command, returning the text to print on success.
pub fn dispatch(args: Args) -> Result<String> {
    match args.cmd {
        Cmd::GenData(c) => cmd_gen_data(&resolve(&c)?, c.force),
        Cmd::BuildCache(c) => cmd_build_cache(&resolve(&c)?, c.force),
        Cmd::Train(c) => cmd_train(&resolve(&c)?),
        Cmd::Eval(c) => cmd_eval(&resolve(&c)?),
        Cmd::Ablate { common, axis } => cmd_ablate(&resolve(&common)?, axis.parse()?),
        Cmd::Report(c) => cmd_report(&resolve(&c)?),
    }
}
