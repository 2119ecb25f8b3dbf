use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use acot::harness::{self, AblateEvent, Grid, RunConfig};
use acot::policy::Variant;

#[derive(Parser)]
#[command(name = "acot", version, about = "Train and evaluate action chain-of-thought policies on the toy suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training seed (same as `--override train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Module variant: baseline, ear, iar or full.
    #[arg(long)]
    variant: Option<String>,
    /// Dotted `key=value` config override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set, the clean suite and the seven perturbation suites.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant; writes metrics.csv, checkpoints and final.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory produced by gen-data.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every suite in the data directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Train and evaluate an ablation grid across seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// modules, ref-config, iar-strategy or ear-scale-denoise.
        #[arg(long)]
        grid: String,
        /// Existing data directory; generated under the output otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample a trained policy, or a synthetic two-mode mixture when no checkpoint is given.
    SampleFlow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
}

fn resolve(common: &Common) -> acot::Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(v) = &common.variant {
        overrides.push(format!("variant=\"{}\"", Variant::parse(v)?.name()));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<acot::Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn progress_line(step: u64, total: u64) -> bool {
    step == 0 || (step + 1).is_multiple_of(100) || step + 1 == total
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let workers = harness::workers_from_env()?;
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let counts = harness::gen_data(&cfg, &common.out).context("gen-data")?;
            for c in counts {
                println!("{:<24} {:>5} episodes ({} attempts, {} rejected)", c.file, c.episodes, c.attempts, c.failures);
            }
        }
        Command::Train { common, data, resume } => {
            let cfg = resolve(&common)?;
            let total = cfg.train.total_steps;
            let summary = harness::train(&cfg, &data, &common.out, resume.as_deref(), workers, &mut |m| {
                if progress_line(m.step, total) {
                    let l_ref = m.l_ref.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                    eprintln!(
                        "step {:>6}  l_ref {l_ref}  l_head {:.4}  lr {:.2e}  |g| {:.3}",
                        m.step + 1,
                        m.l_head,
                        m.lr,
                        m.grad_norm
                    );
                }
            })
            .context("train")?;
            println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
        }
        Command::Eval { common, checkpoint, data } => {
            let cfg = resolve(&common)?;
            let table = harness::eval(&cfg, &checkpoint, &data, &common.out, workers).context("eval")?;
            print!("{}", table.render());
            println!("results in {}", common.out.join("results.json").display());
        }
        Command::Ablate { common, grid, data } => {
            let cfg = resolve(&common)?;
            let grid = Grid::parse(&grid)?;
            let total = cfg.train.total_steps;
            let res = harness::ablate(&cfg, grid, data.as_deref(), &common.out, workers, &mut |ev| match ev {
                AblateEvent::CellStart { label, seed } => eprintln!("== {label} (seed {seed})"),
                AblateEvent::Step(m) if (m.step + 1) % 500 == 0 || m.step + 1 == total => {
                    eprintln!("   step {:>6}  l_head {:.4}", m.step + 1, m.l_head)
                }
                AblateEvent::Step(_) => {}
                AblateEvent::CellDone { label, seed, clean } => {
                    eprintln!("   {label} seed {seed}: clean {:.3}", clean.unwrap_or(f64::NAN))
                }
                AblateEvent::CellFailed { label, seed, error } => eprintln!("   {label} seed {seed} FAILED: {error}"),
            });
            let table_path = common.out.join("results.json");
            match res {
                Ok(table) => print!("{}", table.render()),
                Err(e) => {
                    if let Ok(t) = harness::ResultsTable::load(&table_path) {
                        print!("{}", t.render());
                    }
                    return Err(anyhow::Error::new(e).context("ablate (partial results kept)"));
                }
            }
            println!("results in {}", table_path.display());
        }
        Command::SampleFlow { common, checkpoint, data } => {
            let cfg = resolve(&common)?;
            let s = harness::sample_flow(&cfg, checkpoint.as_deref(), &data, &common.out).context("sample-flow")?;
            println!("{} samples, {} Euler steps ({})", s.n_samples, s.n_steps, s.source);
            for (i, m) in s.modes.iter().enumerate() {
                let c: Vec<String> = m.center.iter().map(|v| format!("{v:+.3}")).collect();
                println!("mode {i}: weight {:.3}  center [{}]", m.weight, c.join(", "));
            }
            println!("samples in {}", Path::new(&common.out).join("samples.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
