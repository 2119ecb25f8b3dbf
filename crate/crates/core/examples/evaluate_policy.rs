//! Closed-loop evaluation of a checkpoint on the clean suite and every
//! perturbation suite. Without arguments it trains a short run first.
//!
//! Run: `cargo run --release --example evaluate_policy [CHECKPOINT DATA_DIR]`

use std::path::PathBuf;

use acot::harness::{eval, gen_data, train, RunConfig};

fn main() -> acot::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::env::temp_dir().join("acot-evaluate-policy");
    let cfg = RunConfig::default().with_overrides(&[
        "data.train_per_task=10".into(),
        "data.eval_per_task=3".into(),
        "data.suite_per_task=2".into(),
        "train.total_steps=300".into(),
        "train.warmup_steps=30".into(),
        "train.batch_size=8".into(),
        "train.checkpoint_every=0".into(),
    ])?;

    let (checkpoint, data) = match args.as_slice() {
        [ck, data] => (PathBuf::from(ck), PathBuf::from(data)),
        _ => {
            let data = out.join("data");
            gen_data(&cfg, &data)?;
            let s = train(&cfg, &data, &out.join("run"), None, 1, &mut |_| {})?;
            (s.checkpoint, data)
        }
    };
    let workers = acot::harness::workers_from_env()?;
    let table = eval(&cfg, &checkpoint, &data, &out.join("eval"), workers)?;
    print!("{}", table.render());
    Ok(())
}
