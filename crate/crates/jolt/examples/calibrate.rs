//! Scratch harness for tuning the reference task. Not part of the
//! shipped examples; deleted once the preset is frozen.

use std::time::Instant;

use jolt::data::{make_synthetic_dataset, sample_episode};
use jolt::diffusion::build_generation_cache;
use jolt::presets::{reference_task, ALPHA_SWEEP};
use jolt::seeds::SeedSplitter;
use jolt::train::{run_mode, train_baseline_finetune, DataMode, ModelBundle};
use jolt::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(String::as_str).unwrap_or("modes");
    let n_seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut setup = reference_task();
    if let Some(a) = args.get(3).and_then(|s| s.parse().ok()) {
        setup.train.alpha = a;
    }
    if let Some(noise) = args.get(4).and_then(|s| s.parse().ok()) {
        setup.data.noise = noise;
    }
    if let Some(ep) = args.get(5).and_then(|s| s.parse().ok()) {
        setup.train.epochs = ep;
    }
    if let Some(de) = args.get(6).and_then(|s| s.parse().ok()) {
        setup.diffusion.denoiser_epochs = de;
    }
    if let Some(wd) = args.get(7).and_then(|s| s.parse().ok()) {
        setup.train.weight_decay = wd;
    }
    if let Some(lr) = args.get(8).and_then(|s| s.parse().ok()) {
        setup.train.base_lr = lr;
    }
    if let Some(cj) = args.get(9).and_then(|s| s.parse().ok()) {
        setup.data.color_jitter = cj;
    }
    println!(
        "alpha {}  noise {}  epochs {}  denoiser_epochs {}  wd {}  lr {}  jitter {}",
        setup.train.alpha,
        setup.data.noise,
        setup.train.epochs,
        setup.diffusion.denoiser_epochs,
        setup.train.weight_decay,
        setup.train.base_lr,
        setup.data.color_jitter
    );
    let ds = make_synthetic_dataset(&setup.data, SeedSplitter::new(setup.seed).stream("dataset"))?;
    let t0 = Instant::now();
    let (cache, _stack, report) = build_generation_cache(
        &ds,
        &setup.diffusion,
        &SeedSplitter::new(setup.seed).scope("diffusion"),
    )?;
    println!(
        "cache build: {:.1}s (ae mse {:.4}; denoiser {:.4} -> {:.4})",
        t0.elapsed().as_secs_f64(),
        report.ae.final_mse,
        report.denoiser.untrained_val_mse,
        report.denoiser.final_val_mse
    );

    let seeds: Vec<u64> = setup.seeds.iter().take(n_seeds).copied().collect();
    match what {
        "modes" => {
            let mut means = [0.0f64; 3];
            let mut wins = 0usize; // joint > finetune per seed
            println!("seed   finetune  augdata   joint     (16-shot)");
            for &seed in &seeds {
                let mut row = [0.0f64; 3];
                for (i, mode) in [DataMode::Finetune, DataMode::Augdata, DataMode::Joint]
                    .into_iter()
                    .enumerate()
                {
                    let t = Instant::now();
                    let out = run_mode(&ds, &cache, mode, &setup.train, setup.shots, seed)?;
                    row[i] = out.report.best.top1;
                    means[i] += row[i];
                    eprintln!("  [{seed} {mode}: {:.4} in {:.0}s]", row[i], t.elapsed().as_secs_f64());
                }
                if row[2] > row[0] {
                    wins += 1;
                }
                println!("{seed}   {:.4}    {:.4}    {:.4}", row[0], row[1], row[2]);
            }
            let n = seeds.len() as f64;
            println!(
                "mean   {:.4}    {:.4}    {:.4}   joint>finetune {}/{}",
                means[0] / n,
                means[1] / n,
                means[2] / n,
                wins,
                seeds.len()
            );
            println!(
                "paired deltas: augdata-finetune {:+.4}  joint-finetune {:+.4}  joint-augdata {:+.4}",
                (means[1] - means[0]) / n,
                (means[2] - means[0]) / n,
                (means[2] - means[1]) / n
            );
        }
        "alpha" => {
            println!("alpha  mean_top1  (per-seed)");
            for &a in &ALPHA_SWEEP {
                let mut cfg = setup.train.clone();
                cfg.alpha = a;
                let mut accs = Vec::new();
                for &seed in &seeds {
                    let out = run_mode(&ds, &cache, DataMode::Joint, &cfg, setup.shots, seed)?;
                    accs.push(out.report.best.top1);
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("{a:.1}    {mean:.4}     {accs:?}");
            }
        }
        "headroom" => {
            // Same world but with a deeper train split: does finetune improve
            // when given more REAL shots? If not, the task is ceiling-limited
            // and no amount of generated data can separate the modes.
            let mut wide = setup.data.clone();
            wide.train_per_class = 48;
            let wds =
                make_synthetic_dataset(&wide, SeedSplitter::new(setup.seed).stream("dataset"))?;
            let mut dcfg = setup.diffusion.clone();
            dcfg.records_per_class = 48;
            let (wcache, _, _) = build_generation_cache(
                &wds,
                &dcfg,
                &SeedSplitter::new(setup.seed).scope("diffusion"),
            )?;
            for shots in [8usize, 16, 32, 48] {
                let mut mean = 0.0;
                for &seed in &seeds {
                    let split = SeedSplitter::new(seed);
                    let episode =
                        sample_episode(&wds, &wcache, shots, &split.scope("episode"), true)?;
                    let models = ModelBundle::new(wds.cfg.n_classes, &split.scope("models"));
                    let out = train_baseline_finetune(
                        &episode,
                        &wds.test.images,
                        &wds.test.labels,
                        models,
                        &setup.train,
                        &split.scope("train"),
                        false,
                    )?;
                    mean += out.report.best.top1;
                }
                println!("real shots {shots:>2}: {:.4}", mean / seeds.len() as f64);
            }
        }
        "fidelity" => {
            // Per-mode pixel stats of generated vs real images for class 0:
            // does conditioning actually steer the appearance mode?
            let stats_of = |img: &jolt::tensor::Tensor| {
                let d = img.data();
                let hw = d.len() / 3;
                let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
                let var: f64 =
                    d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
                let mut chroma = 0.0;
                for p in 0..hw {
                    let (r, g, b) = (d[p], d[hw + p], d[2 * hw + p]);
                    chroma += r.max(g).max(b) - r.min(g).min(b);
                }
                (mean, var.sqrt(), chroma / hw as f64)
            };
            println!("mode  real(mean/sd/chroma)      gen(mean/sd/chroma)   n_real");
            for m in 0..10usize {
                let mut real = (0.0, 0.0, 0.0);
                let mut n_real = 0usize;
                for (i, img) in ds.pool.images.iter().enumerate() {
                    if ds.pool.labels[i] == 0 && jolt::data::style_mode(ds.pool.styles[i]) == m {
                        let s = stats_of(img);
                        real = (real.0 + s.0, real.1 + s.1, real.2 + s.2);
                        n_real += 1;
                    }
                }
                let mut gen = (0.0, 0.0, 0.0);
                let mut n_gen = 0usize;
                for r in cache.records_for_class(0)? {
                    if r.condition_token % 10 == m {
                        let s = stats_of(&r.image);
                        gen = (gen.0 + s.0, gen.1 + s.1, gen.2 + s.2);
                        n_gen += 1;
                    }
                }
                let rn = n_real.max(1) as f64;
                let gn = n_gen.max(1) as f64;
                println!(
                    "{m}    {:.3}/{:.3}/{:.3}        {:.3}/{:.3}/{:.3}    {n_real}",
                    real.0 / rn,
                    real.1 / rn,
                    real.2 / rn,
                    gen.0 / gn,
                    gen.1 / gn,
                    gen.2 / gn
                );
            }
        }
        other => eprintln!("unknown mode {other}; use modes|alpha|headroom|fidelity"),
    }
    Ok(())
}
