//! The full two-phase training loop on a small world: phase V on real
//! support images, phase G on generated image/latent pairs with the
//! combined loss, cosine decay, layer-wise LR scaling, and EMA shadows.
//!
//! ```text
//! cargo run --release -p jolt --example joint_training
//! ```

use jolt::data::{make_synthetic_dataset, sample_episode};
use jolt::diffusion::build_generation_cache;
use jolt::eval::count_params;
use jolt::presets;
use jolt::seeds::SeedSplitter;
use jolt::train::{train_joint, ModelBundle};
use jolt::Result;

fn main() -> Result<()> {
    let setup = presets::quick_smoke();
    let ds = make_synthetic_dataset(&setup.data, 17)?;
    let seeds = SeedSplitter::new(setup.seed);
    println!("building generation cache (tiny stack, a few seconds)...");
    let (cache, _stack, _report) = build_generation_cache(&ds, &setup.diffusion, &seeds.scope("diffusion"))?;

    let episode = sample_episode(&ds, &cache, setup.shots, &seeds.scope("episode"), false)?;
    let models = ModelBundle::new(setup.data.n_classes, &seeds.scope("models"));
    let counts = count_params(&models);
    println!(
        "models: image encoder {} params, latent encoder {} params ({:.1}% of image side)",
        counts.image_encoder,
        counts.latent_encoder,
        100.0 * counts.latent_ratio()
    );

    let mut cfg = setup.train.clone();
    cfg.eval_every = 1; // record accuracy every epoch for the trace below
    cfg.epochs = 6;
    cfg.base_lr = 3e-3;
    let out = train_joint(&episode, &ds.test.images, &ds.test.labels, models, &cfg, &seeds.scope("train"))?;

    println!(
        "ran {} epochs ({} optimizer steps); phase order {}",
        out.report.effective_epochs, out.report.total_steps, cfg.phase_order
    );
    println!("epoch  loss_v   loss_g   lr        top1(raw)  top1(ema)");
    for (i, e) in out.report.epochs.iter().enumerate() {
        println!(
            "{:>5}  {:.4}   {}   {:.2e}  {}      {}",
            i,
            e.loss_v,
            e.loss_g.map_or("  -   ".into(), |v| format!("{v:.4}")),
            e.lr,
            e.acc_raw.map_or(" -    ".into(), |v| format!("{v:.4}")),
            e.acc_ema.map_or(" -    ".into(), |v| format!("{v:.4}")),
        );
    }
    println!(
        "final: raw {:.4}, ema {:.4}; best reported = {:.4} ({} weights)",
        out.report.final_raw.top1,
        out.report.final_ema.top1,
        out.report.best.top1,
        out.report.best.weights_used
    );
    Ok(())
}
