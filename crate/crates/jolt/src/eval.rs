//! Scoring and ablation harness.
//!
//! [`evaluate`] scores an encoder + probe pair on a labeled split and is
//! deliberately parameterized by the weight set, so the same call scores
//! raw weights and EMA shadows. The ablation harness runs full training
//! jobs over a grid of (cell, seed) tasks, records per-seed outcomes
//! (including failures, which do not abort the sweep), and serializes the
//! grid to CSV and JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::diffusion::GenerationCache;
use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::{ImageEncoder, LinearProbe, ParameterSet};
use crate::tensor::kernels::softmax_temp_rows;
use crate::tensor::{Tape, Tensor};
use crate::train::{run_mode, DataMode, ModelBundle, TrainConfig};

/// Which weight set produced a result. Recorded rather than implied so a
/// report line is self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsUsed {
    Raw,
    Ema,
}

impl std::fmt::Display for WeightsUsed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightsUsed::Raw => write!(f, "raw"),
            WeightsUsed::Ema => write!(f, "ema"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    /// Top-min(5, n_classes) accuracy.
    pub top5: f64,
    /// Per-class top-1 accuracy; 0.0 for classes absent from the split.
    pub per_class: Vec<f64>,
    pub n_test: usize,
    pub weights_used: WeightsUsed,
}

/// Picks the better of two results by top-1; ties go to `a`, so callers
/// passing (raw, ema) prefer raw weights on a tie.
pub fn better(a: EvalResult, b: EvalResult) -> EvalResult {
    if b.top1 > a.top1 {
        b
    } else {
        a
    }
}

struct RankCounts {
    top1_hits: usize,
    topk_hits: usize,
    per_class_hits: Vec<usize>,
    per_class_n: Vec<usize>,
}

/// Ranks each row's label among the class scores. The label's rank is the
/// number of classes scoring strictly higher, plus equal-scoring classes
/// with a smaller index; exactly one class per row has rank 0, so ties
/// resolve deterministically.
fn rank_stats(scores: &[f64], rows: usize, n_classes: usize, labels: &[usize], k: usize) -> RankCounts {
    let mut rc = RankCounts {
        top1_hits: 0,
        topk_hits: 0,
        per_class_hits: vec![0; n_classes],
        per_class_n: vec![0; n_classes],
    };
    for (r, &label) in labels.iter().enumerate().take(rows) {
        let row = &scores[r * n_classes..(r + 1) * n_classes];
        let pl = row[label];
        let mut rank = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if p > pl || (p == pl && j < label) {
                rank += 1;
            }
        }
        rc.per_class_n[label] += 1;
        if rank == 0 {
            rc.top1_hits += 1;
            rc.per_class_hits[label] += 1;
        }
        if rank < k {
            rc.topk_hits += 1;
        }
    }
    rc
}

const EVAL_CHUNK: usize = 64;

/// Scores `images` through a frozen encoder + probe built from the given
/// parameter sets. Passing the model's own sets scores raw weights;
/// passing EMA shadows (same structure) scores the averaged weights.
/// Predictions go through the tempered softmax with the run's `gamma`,
/// matching the training-time readout.
pub fn evaluate(
    enc: &ImageEncoder,
    probe: &LinearProbe,
    enc_params: &ParameterSet,
    probe_params: &ParameterSet,
    images: &[Tensor],
    labels: &[usize],
    gamma: f64,
    weights_used: WeightsUsed,
) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::InvalidArg("evaluate: empty test set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidArg(format!(
            "evaluate: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let n_classes = probe_classes(probe);
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArg(format!(
            "evaluate: label {bad} out of range for {n_classes} classes"
        )));
    }
    let k = 5.min(n_classes);
    let mut totals = RankCounts {
        top1_hits: 0,
        topk_hits: 0,
        per_class_hits: vec![0; n_classes],
        per_class_n: vec![0; n_classes],
    };
    for (chunk, lab_chunk) in images.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let x = Tensor::stack(&refs)?;
        let mut tape = Tape::new();
        let be = enc_params.bind_frozen(&mut tape);
        let bp = probe_params.bind_frozen(&mut tape);
        let xv = tape.leaf(x.shape(), x.data().to_vec(), false)?;
        let feats = enc.forward(&mut tape, &be, xv)?;
        let logits = probe.forward(&mut tape, &bp, feats)?;
        let rows = chunk.len();
        let mut probs = vec![0.0; rows * n_classes];
        softmax_temp_rows(tape.data(logits), rows, n_classes, gamma, &mut probs);
        let rc = rank_stats(&probs, rows, n_classes, lab_chunk, k);
        totals.top1_hits += rc.top1_hits;
        totals.topk_hits += rc.topk_hits;
        for c in 0..n_classes {
            totals.per_class_hits[c] += rc.per_class_hits[c];
            totals.per_class_n[c] += rc.per_class_n[c];
        }
    }
    let n = images.len();
    let per_class = (0..n_classes)
        .map(|c| {
            if totals.per_class_n[c] == 0 {
                0.0
            } else {
                totals.per_class_hits[c] as f64 / totals.per_class_n[c] as f64
            }
        })
        .collect();
    Ok(EvalResult {
        top1: totals.top1_hits as f64 / n as f64,
        top5: totals.topk_hits as f64 / n as f64,
        per_class,
        n_test: n,
        weights_used,
    })
}

fn probe_classes(probe: &LinearProbe) -> usize {
    probe
        .params
        .get("w")
        .expect("probe has a weight matrix")
        .tensor
        .shape()[1]
}

// ── Parameter accounting ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub image_encoder: usize,
    pub image_probe: usize,
    pub latent_encoder: usize,
    pub latent_probe: usize,
}

impl ParamCounts {
    /// Latent-encoder size relative to the image encoder.
    pub fn latent_ratio(&self) -> f64 {
        self.latent_encoder as f64 / self.image_encoder as f64
    }
}

fn set_numel(params: &ParameterSet) -> usize {
    params.iter().map(|p| p.tensor.numel()).sum()
}

/// Counts parameters per component. The latent branch is meant to be an
/// auxiliary, so this asserts it is strictly smaller than the image
/// encoder it assists.
pub fn count_params(models: &ModelBundle) -> ParamCounts {
    let counts = ParamCounts {
        image_encoder: set_numel(&models.image_enc.params),
        image_probe: set_numel(&models.image_probe.params),
        latent_encoder: set_numel(&models.latent_enc.params),
        latent_probe: set_numel(&models.latent_probe.params),
    };
    assert!(
        counts.latent_encoder < counts.image_encoder,
        "latent encoder ({}) must be smaller than image encoder ({})",
        counts.latent_encoder,
        counts.image_encoder
    );
    counts
}

// ── Linear separability ─────────────────────────────────────────────────

/// Trains a zero-initialized linear probe on flattened `train` tensors by
/// full-batch gradient descent and returns test top-1 accuracy. No
/// randomness anywhere, so the result is a pure function of the inputs.
/// Used to check that a representation (e.g. generated latents) carries
/// linearly readable class signal.
pub fn linear_probe_accuracy(
    train_x: &[Tensor],
    train_y: &[usize],
    test_x: &[Tensor],
    test_y: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::InvalidArg("linear_probe_accuracy: empty split".into()));
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::InvalidArg(
            "linear_probe_accuracy: image/label length mismatch".into(),
        ));
    }
    let d = train_x[0].numel();
    let flatten = |xs: &[Tensor]| -> Vec<f64> {
        let mut out = Vec::with_capacity(xs.len() * d);
        for x in xs {
            out.extend_from_slice(x.data());
        }
        out
    };
    let xtr = flatten(train_x);
    let xte = flatten(test_x);
    let mut w = vec![0.0; d * n_classes];
    let mut b = vec![0.0; n_classes];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(&[train_x.len(), d], xtr.clone(), false)?;
        let wv = tape.leaf(&[d, n_classes], w.clone(), true)?;
        let bv = tape.leaf(&[n_classes], b.clone(), true)?;
        let logits = tape.linear(xv, wv, bv)?;
        let loss = tape.smoothed_ce(logits, train_y, 0.0, 1.0)?;
        tape.backward(loss)?;
        let gw = tape.grad(wv).expect("weight grad");
        let gb = tape.grad(bv).expect("bias grad");
        for (p, g) in w.iter_mut().zip(gw) {
            *p -= lr * g;
        }
        for (p, g) in b.iter_mut().zip(gb) {
            *p -= lr * g;
        }
    }
    let rows = test_x.len();
    let mut logits = vec![0.0; rows * n_classes];
    for r in 0..rows {
        for c in 0..n_classes {
            let mut acc = b[c];
            for j in 0..d {
                acc += xte[r * d + j] * w[j * n_classes + c];
            }
            logits[r * n_classes + c] = acc;
        }
    }
    let rc = rank_stats(&logits, rows, n_classes, test_y, 1);
    Ok(rc.top1_hits as f64 / rows as f64)
}

// ── Ablation harness ────────────────────────────────────────────────────

/// Everything a sweep needs; cheap to share across cells by reference.
pub struct AblationContext<'a> {
    pub ds: &'a SyntheticDataset,
    pub cache: &'a GenerationCache,
    pub cfg: &'a TrainConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub weights: Option<WeightsUsed>,
    /// Populated instead of the metrics when the run failed; the sweep
    /// keeps going so one bad cell cannot sink a long ablation.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// Axis value rendered as text ("0.30", "joint", "v-first", "8").
    pub value: String,
    pub shot: usize,
    pub outcomes: Vec<SeedOutcome>,
    /// Mean/std over successful seeds; absent when every seed failed.
    pub mean_top1: Option<f64>,
    /// Sample standard deviation (n - 1); 0.0 for a single seed.
    pub std_top1: Option<f64>,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: String,
    pub cells: Vec<CellResult>,
    pub seeds: Vec<u64>,
    /// Hash of the test split every cell was scored on. One number in the
    /// artifact makes "same data everywhere" checkable after the fact.
    pub test_split_hash: u64,
}

#[derive(Clone)]
struct CellSpec {
    value: String,
    shot: usize,
    mode: DataMode,
    cfg: TrainConfig,
}

fn run_cells(ctx: &AblationContext, axis: &str, specs: Vec<CellSpec>) -> AblationGrid {
    use rayon::prelude::*;

    let tasks: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| ctx.seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let outcomes: Vec<SeedOutcome> = tasks
        .par_iter()
        .map(|&(ci, seed)| {
            let spec = &specs[ci];
            match run_mode(ctx.ds, ctx.cache, spec.mode, &spec.cfg, spec.shot, seed) {
                Ok(out) => {
                    let best = out.report.best;
                    SeedOutcome {
                        seed,
                        top1: Some(best.top1),
                        top5: Some(best.top5),
                        weights: Some(best.weights_used),
                        error: None,
                    }
                }
                Err(e) => SeedOutcome {
                    seed,
                    top1: None,
                    top5: None,
                    weights: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let per_cell = ctx.seeds.len();
    let cells = specs
        .into_iter()
        .enumerate()
        .map(|(ci, spec)| {
            let slice = outcomes[ci * per_cell..(ci + 1) * per_cell].to_vec();
            let oks: Vec<f64> = slice.iter().filter_map(|o| o.top1).collect();
            let n_ok = oks.len();
            let (mean, std) = if n_ok == 0 {
                (None, None)
            } else {
                let m = oks.iter().sum::<f64>() / n_ok as f64;
                let s = if n_ok < 2 {
                    0.0
                } else {
                    (oks.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_ok - 1) as f64).sqrt()
                };
                (Some(m), Some(s))
            };
            CellResult {
                value: spec.value,
                shot: spec.shot,
                outcomes: slice,
                mean_top1: mean,
                std_top1: std,
                n_ok,
            }
        })
        .collect();
    AblationGrid {
        axis: axis.to_string(),
        cells,
        seeds: ctx.seeds.clone(),
        test_split_hash: ctx.ds.test_split_hash(),
    }
}

/// Sweeps the loss-mixing factor at a fixed shot count, joint recipe.
pub fn sweep_latent_factor(ctx: &AblationContext, alphas: &[f64], shots: usize) -> AblationGrid {
    let specs = alphas
        .iter()
        .map(|&a| {
            let mut cfg = ctx.cfg.clone();
            cfg.alpha = a;
            CellSpec {
                value: format!("{a:.2}"),
                shot: shots,
                mode: DataMode::Joint,
                cfg,
            }
        })
        .collect();
    run_cells(ctx, "alpha", specs)
}

/// Crosses the three training recipes with the given shot counts.
pub fn ablate_data_mode(ctx: &AblationContext, shots: &[usize]) -> AblationGrid {
    let mut specs = Vec::new();
    for mode in [DataMode::Joint, DataMode::Augdata, DataMode::Finetune] {
        for &k in shots {
            specs.push(CellSpec {
                value: mode.to_string(),
                shot: k,
                mode,
                cfg: ctx.cfg.clone(),
            });
        }
    }
    run_cells(ctx, "data", specs)
}

/// Crosses the two per-epoch phase orders with the given shot counts,
/// joint recipe.
pub fn ablate_stage_order(ctx: &AblationContext, shots: &[usize]) -> AblationGrid {
    use crate::train::PhaseOrder;
    let mut specs = Vec::new();
    for order in [PhaseOrder::VFirst, PhaseOrder::GFirst] {
        for &k in shots {
            let mut cfg = ctx.cfg.clone();
            cfg.phase_order = order;
            specs.push(CellSpec {
                value: order.to_string(),
                shot: k,
                mode: DataMode::Joint,
                cfg,
            });
        }
    }
    run_cells(ctx, "order", specs)
}

/// Sweeps the shot count for one fixed recipe.
pub fn ablate_shots(ctx: &AblationContext, shots: &[usize], mode: DataMode) -> AblationGrid {
    let specs = shots
        .iter()
        .map(|&k| CellSpec {
            value: k.to_string(),
            shot: k,
            mode,
            cfg: ctx.cfg.clone(),
        })
        .collect();
    run_cells(ctx, "shots", specs)
}

/// For an order grid: per shot count, mean top-1 of v-first minus
/// g-first, skipping shots where either side has no successful seeds.
pub fn order_deltas(grid: &AblationGrid) -> Vec<(usize, f64)> {
    let mut shots: Vec<usize> = grid.cells.iter().map(|c| c.shot).collect();
    shots.sort_unstable();
    shots.dedup();
    let mean_of = |value: &str, shot: usize| -> Option<f64> {
        grid.cells
            .iter()
            .find(|c| c.value == value && c.shot == shot)
            .and_then(|c| c.mean_top1)
    };
    shots
        .into_iter()
        .filter_map(|k| {
            let v = mean_of("v-first", k)?;
            let g = mean_of("g-first", k)?;
            Some((k, v - g))
        })
        .collect()
}

// ── Artifacts ───────────────────────────────────────────────────────────

fn csv_escape(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

/// One row per (cell, seed). Failed seeds keep their row with empty
/// metric fields and the error text in the last column.
pub fn grid_csv(grid: &AblationGrid) -> String {
    let mut out = String::from("axis,value,shot,seed,top1,top5,weights,error\n");
    for cell in &grid.cells {
        for o in &cell.outcomes {
            let top1 = o.top1.map(|v| format!("{v:.6}")).unwrap_or_default();
            let top5 = o.top5.map(|v| format!("{v:.6}")).unwrap_or_default();
            let w = o.weights.map(|w| w.to_string()).unwrap_or_default();
            let err = o.error.as_deref().map(csv_escape).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                grid.axis, cell.value, cell.shot, o.seed, top1, top5, w, err
            ));
        }
    }
    out
}

/// Aligned text table of per-cell summaries, fit for a terminal report.
pub fn render_grid_table(grid: &AblationGrid) -> String {
    let mut out = format!(
        "axis: {}   seeds: {:?}   test_split: {:#018x}\n",
        grid.axis, grid.seeds, grid.test_split_hash
    );
    let header = ["value", "shot", "mean_top1", "std_top1", "ok"];
    let mut rows: Vec<[String; 5]> = Vec::new();
    for c in &grid.cells {
        rows.push([
            c.value.clone(),
            c.shot.to_string(),
            c.mean_top1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            c.std_top1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            format!("{}/{}", c.n_ok, c.outcomes.len()),
        ]);
    }
    let mut widths = [0usize; 5];
    for (i, h) in header.iter().enumerate() {
        widths[i] = h.len();
    }
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String; 5]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            line.push_str(&format!("{:<w$}", cell, w = widths[i]));
            if i + 1 < cells.len() {
                line.push_str("  ");
            }
        }
        line.push('\n');
        line
    };
    out.push_str(&fmt_row(&header.map(String::from)));
    for row in &rows {
        out.push_str(&fmt_row(row));
    }
    if grid.axis == "order" {
        let deltas = order_deltas(grid);
        if !deltas.is_empty() {
            out.push_str("order sensitivity (v-first minus g-first, mean top1):\n");
            for (k, d) in deltas {
                out.push_str(&format!("  {k}-shot: {d:+.4}\n"));
            }
        }
    }
    out
}

/// Writes `<axis>_<stamp>.{csv,json}` plus `<axis>_latest.{csv,json}`
/// copies into `dir`. The stamped pair is history; the `_latest` pair is
/// the canonical artifact reruns are compared against (its bytes carry no
/// timestamps). Returns the four paths written.
pub fn write_grid(grid: &AblationGrid, dir: &Path, stamp: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = grid_csv(grid);
    let json =
        serde_json::to_string_pretty(grid).map_err(|e| Error::Config(format!("grid json: {e}")))?;
    let mut written = Vec::new();
    for (suffix, body) in [("csv", &csv), ("json", &json)] {
        for name in [
            format!("{}_{}.{}", grid.axis, stamp, suffix),
            format!("{}_latest.{}", grid.axis, suffix),
        ] {
            let path = dir.join(name);
            fsio::write_atomic(&path, body.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
