//! Sweeping the latent loss factor: at 0 the latent branch is inert, at 1
//! the generated images stop contributing; interior values mix both
//! gradients. Produces the same grid artifact the `ablate` subcommand
//! writes, at smoke scale.
//!
//! ```text
//! cargo run --release -p jolt --example alpha_sweep
//! ```

use jolt::data::make_synthetic_dataset;
use jolt::diffusion::build_generation_cache;
use jolt::eval::{grid_csv, render_grid_table, sweep_latent_factor, AblationContext};
use jolt::presets;
use jolt::seeds::SeedSplitter;
use jolt::Result;

fn main() -> Result<()> {
    let setup = presets::quick_smoke();
    let ds = make_synthetic_dataset(&setup.data, 17)?;
    let seeds = SeedSplitter::new(setup.seed);
    println!("building generation cache...");
    let (cache, _stack, _report) =
        build_generation_cache(&ds, &setup.diffusion, &seeds.scope("diffusion"))?;

    let mut cfg = setup.train.clone();
    cfg.epochs = 4;
    cfg.base_lr = 3e-3;
    let ctx = AblationContext {
        ds: &ds,
        cache: &cache,
        cfg: &cfg,
        seeds: setup.seeds.clone(),
    };
    let grid = sweep_latent_factor(&ctx, &[0.0, 0.3, 0.7, 1.0], setup.shots);
    println!("\n{}", render_grid_table(&grid));
    println!("csv rows (same bytes `jolt ablate --axis alpha` would write):");
    for line in grid_csv(&grid).lines().take(5) {
        println!("  {line}");
    }
    println!("  ...");
    Ok(())
}
