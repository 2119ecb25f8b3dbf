//! Generates a small dataset and trains the full model, streaming losses.
//! Writes `metrics.csv`, `config.json` and checkpoints under the output
//! directory (first argument, default a temp dir).
//!
//! Run: `cargo run --release --example train_policy [OUT_DIR]`

use std::path::PathBuf;

use acot::harness::{gen_data, train, RunConfig};

fn main() -> acot::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("acot-train-policy"));
    let cfg = RunConfig::default().with_overrides(&[
        "data.train_per_task=10".into(),
        "data.eval_per_task=2".into(),
        "data.suite_per_task=1".into(),
        "train.total_steps=300".into(),
        "train.warmup_steps=30".into(),
        "train.batch_size=8".into(),
        "train.checkpoint_every=100".into(),
    ])?;

    let data = out.join("data");
    for f in gen_data(&cfg, &data)? {
        println!("{:<22} {:4} episodes", f.file, f.episodes);
    }

    let summary = train(&cfg, &data, &out.join("run"), None, 1, &mut |m| {
        if m.step % 50 == 0 {
            let l_ref = m.l_ref.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!("step {:4}  L_ref {l_ref}  L_head {:.4}  lr {:.2e}  |g| {:.3}", m.step, m.l_head, m.lr, m.grad_norm);
        }
    })?;
    println!("{} steps, final checkpoint {}", summary.steps, summary.checkpoint.display());
    Ok(())
}
