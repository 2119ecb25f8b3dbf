//! Runs one ablation grid end to end and prints its results table. Grids:
//! modules, ref-config, iar-strategy, ear-scale-denoise. Sizes are kept
//! small; raise `train.total_steps` via the second argument for real runs.
//!
//! Run: `cargo run --release --example ablation_grid [GRID] [STEPS]`

use acot::harness::{ablate, AblateEvent, Grid, RunConfig};

fn main() -> acot::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = Grid::parse(&args.next().unwrap_or_else(|| "iar-strategy".into()))?;
    let steps = args.next().unwrap_or_else(|| "200".into());
    let cfg = RunConfig::default().with_overrides(&[
        "data.train_per_task=8".into(),
        "data.eval_per_task=2".into(),
        "data.suite_per_task=1".into(),
        format!("train.total_steps={steps}"),
        "train.warmup_steps=20".into(),
        "train.batch_size=8".into(),
        "train.checkpoint_every=0".into(),
        "ablate.seeds=[0]".into(),
    ])?;
    let out = std::env::temp_dir().join(format!("acot-ablation-{}", grid.name()));
    let table = ablate(&cfg, grid, None, &out, 1, &mut |e| match e {
        AblateEvent::CellStart { label, seed } => println!("training {label} (seed {seed})"),
        AblateEvent::CellDone { clean, .. } => println!("  clean success {:.2}", clean.unwrap_or(f64::NAN)),
        AblateEvent::CellFailed { error, .. } => println!("  failed: {error}"),
        AblateEvent::Step(_) => {}
    })?;
    print!("{}", table.render());
    for row in &table.losses {
        println!("{:<18} L_head {:.3} -> {:.3}  guidance {}x{}", row.variant, row.l_head_initial, row.l_head_final, row.guidance_rows, row.guidance_dim);
    }
    Ok(())
}
