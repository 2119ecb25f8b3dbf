//! Command implementations behind the `acot` binary: data generation,
//! training, evaluation, ablation grids and flow sampling.

pub mod config;
pub mod eval;
pub mod grid;
pub mod results;
pub mod sample_flow;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{tokenize_instruction, tokenize_observation, MultimodalInput};
use crate::env::dataset::{generate_eval, generate_train, Dataset};
use crate::env::perturb::{Category, PerturbationSuite};
use crate::error::{Error, Result};
use crate::policy::{Model, ModelPolicy};
use crate::tensor::ParamStore;
use crate::trainer::{load_policy, Checkpoint, StepMetrics, TrainSet, Trainer, TrainerSpec};

pub use config::{workers_from_env, RunConfig, WORKERS_ENV};
pub use grid::{Grid, GridCell};
pub use results::{ResultsTable, CLEAN_SUITE};
pub use sample_flow::{FlowSummary, SyntheticDenoiser};

use eval::{check_suite, discover_suites, load_dataset, suite_file, TRAIN_FILE};

/// Episodes and generator statistics for one written file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileCount {
    pub file: String,
    pub episodes: usize,
    pub attempts: usize,
    pub failures: usize,
}

/// Writes the training set, the clean evaluation suite and one file per
/// perturbation category into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<FileCount>> {
    std::fs::create_dir_all(out)?;
    cfg.write_echo(out)?;
    let mut counts = Vec::new();
    let mut write = |name: String, ds: Dataset, attempts: usize, failures: usize| -> Result<()> {
        ds.save(&out.join(&name))?;
        counts.push(FileCount { file: name, episodes: ds.records.len(), attempts, failures });
        Ok(())
    };
    let (train, st) = generate_train(&cfg.env, cfg.data.train_per_task, cfg.data.seed)?;
    write(TRAIN_FILE.to_string(), train, st.attempts, st.failures)?;
    let (clean, st) = generate_eval(&cfg.env, cfg.data.eval_per_task, None, cfg.data.seed)?;
    write(suite_file(CLEAN_SUITE), clean, st.attempts, st.failures)?;
    for category in Category::ALL {
        let suite = PerturbationSuite { category, params: cfg.perturb.clone() };
        let (ds, st) = generate_eval(&cfg.env, cfg.data.suite_per_task, Some(&suite), cfg.data.seed)?;
        write(suite_file(category.name()), ds, st.attempts, st.failures)?;
    }
    Ok(counts)
}

/// Loads `train.acot` from `data_dir` as supervised examples for `spec`.
pub fn load_train_set(data_dir: &Path, spec: &TrainerSpec) -> Result<TrainSet> {
    let ds = load_dataset(&data_dir.join(TRAIN_FILE))?;
    if ds.header.kind != "train" {
        return Err(Error::Data(format!("{} is not a training set", data_dir.join(TRAIN_FILE).display())));
    }
    if ds.header.env.delta_max != spec.delta_max {
        return Err(Error::Data(format!(
            "training data delta_max {} differs from the config's {}",
            ds.header.env.delta_max, spec.delta_max
        )));
    }
    TrainSet::from_episodes(ds.episodes(), &spec.model, &spec.norm())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Keeps the header and the rows for steps below `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{}\n", StepMetrics::CSV_HEADER);
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s < step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs `trainer` to its configured total, streaming metrics to
/// `out/metrics.csv` and writing periodic and final checkpoints.
pub fn run_training(
    trainer: &mut Trainer,
    data: &TrainSet,
    out: &Path,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let metrics_path = out.join(METRICS_FILE);
    let prefix = truncate_metrics(&metrics_path, trainer.step)?;
    let mut csv = BufWriter::new(File::create(&metrics_path)?);
    csv.write_all(prefix.as_bytes())?;
    let total = trainer.spec.train.total_steps;
    let every = trainer.spec.train.checkpoint_every;
    let mut last = None;
    trainer.train_until(data, total, |t, m| {
        writeln!(csv, "{}", m.csv_row())?;
        progress(m);
        last = Some(*m);
        if every > 0 && t.step % every == 0 && t.step < total {
            csv.flush()?;
            t.checkpoint()?.save(&out.join("checkpoints").join(format!("step-{:06}.ckpt", t.step)))?;
        }
        Ok(())
    })?;
    csv.flush()?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint()?.save(&checkpoint)?;
    Ok(TrainSummary { steps: trainer.step, last, checkpoint })
}

/// `train`: fresh or resumed from `resume`.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    workers: usize,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.trainer_spec())?,
    };
    trainer.workers = workers;
    let data = load_train_set(data_dir, &trainer.spec)?;
    cfg.write_echo(out)?;
    run_training(&mut trainer, &data, out, progress)
}

/// Evaluates a model on every suite in `data_dir` and adds the counts to
/// `table` under `label`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    table: &mut ResultsTable,
    label: &str,
    seed: u64,
    model: &Model,
    store: &ParamStore,
    cfg: &RunConfig,
    data_dir: &Path,
    perturbed: bool,
    workers: usize,
) -> Result<()> {
    let policy = ModelPolicy { model, store };
    for (suite, path) in discover_suites(data_dir, perturbed)? {
        let ds = load_dataset(&path)?;
        check_suite(&ds, &suite, model.norm.delta_max)?;
        let ok = eval::evaluate(&policy, &ds, &ds.header.env, model.cfg.agp.execute_k, cfg.eval.seed, workers)?;
        table.push(label, &suite, seed, ok.iter().filter(|&&s| s).count(), ok.len());
    }
    Ok(())
}

/// `eval`: loads a checkpoint (EMA weights by default) and writes
/// `results.{json,csv}` plus the perturbation table.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path, workers: usize) -> Result<ResultsTable> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, store) = load_policy(&ck, cfg.eval.use_ema)?;
    let spec: TrainerSpec = serde_json::from_str(&ck.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut table = ResultsTable::new("Evaluation");
    evaluate_model(
        &mut table,
        model.variant.label(),
        spec.train.seed,
        &model,
        &store,
        cfg,
        data_dir,
        cfg.eval.perturbed,
        workers,
    )?;
    table.aggregate_medians();
    cfg.write_echo(out)?;
    table.save(out, "results")?;
    Ok(table)
}

/// Progress events from a grid run.
#[derive(Clone, Debug)]
pub enum AblateEvent<'a> {
    CellStart { label: &'a str, seed: u64 },
    Step(&'a StepMetrics),
    CellDone { label: &'a str, seed: u64, clean: Option<f64> },
    CellFailed { label: &'a str, seed: u64, error: &'a Error },
}

fn run_cell(
    cell: &GridCell,
    seed: u64,
    data_dir: &Path,
    dir: &Path,
    workers: usize,
    table: &mut ResultsTable,
    progress: &mut dyn FnMut(AblateEvent<'_>),
) -> Result<()> {
    let mut cfg = cell.config.clone();
    cfg.train.seed = seed;
    cfg.write_echo(dir)?;
    let mut trainer = Trainer::new(cfg.trainer_spec())?;
    trainer.workers = workers;
    let data = load_train_set(data_dir, &trainer.spec)?;
    let (_, l_head_initial) = trainer.evaluate_losses(&data, 64, seed)?;
    run_training(&mut trainer, &data, dir, &mut |m| progress(AblateEvent::Step(m)))?;
    let (_, l_head_final) = trainer.evaluate_losses(&data, 64, seed)?;
    let (model, store) = load_policy(&trainer.checkpoint()?, cfg.eval.use_ema)?;
    let (guidance_rows, guidance_dim) = match &model.iar {
        Some(iar) => {
            let cache = model.backbone.encode_values(&store, &data.examples[0].input)?;
            let z = iar.extract(&store, &cache)?.z_im;
            (z.rows(), z.cols())
        }
        None => (0, 0),
    };
    table.losses.push(results::LossRow {
        variant: cell.label.clone(),
        seed,
        l_head_initial,
        l_head_final,
        guidance_rows,
        guidance_dim,
    });
    evaluate_model(table, &cell.label, seed, &model, &store, &cfg, data_dir, cfg.ablate.perturbed, workers)
}

/// `ablate`: trains and evaluates every cell of `grid` for each configured
/// seed. A failing cell is recorded and the rest still run; the table is
/// saved after every cell. Returns the first cell error, if any, after
/// everything has run.
pub fn ablate(
    cfg: &RunConfig,
    grid: Grid,
    data_dir: Option<&Path>,
    out: &Path,
    workers: usize,
    progress: &mut dyn FnMut(AblateEvent<'_>),
) -> Result<ResultsTable> {
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate.seeds must not be empty".into()));
    }
    std::fs::create_dir_all(out)?;
    cfg.write_echo(out)?;
    let data_dir = match data_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            if !d.join(TRAIN_FILE).exists() {
                gen_data(cfg, &d)?;
            }
            d
        }
    };
    let mut table = ResultsTable::new(grid.title());
    let mut first_error = None;
    for cell in grid.cells(cfg) {
        for &seed in &cfg.ablate.seeds {
            progress(AblateEvent::CellStart { label: &cell.label, seed });
            let dir = out.join("cells").join(grid::slug(&cell.label)).join(format!("seed-{seed}"));
            match run_cell(&cell, seed, &data_dir, &dir, workers, &mut table, progress) {
                Ok(()) => {
                    let clean = table.rate(&cell.label, CLEAN_SUITE, seed);
                    progress(AblateEvent::CellDone { label: &cell.label, seed, clean });
                }
                Err(e) => {
                    progress(AblateEvent::CellFailed { label: &cell.label, seed, error: &e });
                    table.failures.push(results::CellFailure {
                        variant: cell.label.clone(),
                        seed,
                        error: e.to_string(),
                    });
                    first_error.get_or_insert(e);
                }
            }
            table.aggregate_medians();
            table.save(out, "results")?;
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(table),
    }
}

/// `sample-flow`: with a checkpoint, samples action chunks for the first
/// clean evaluation scene and summarizes their first actions; otherwise
/// trains an unguided head on the synthetic two-mode mixture and samples
/// it. Writes `samples.csv` and `summary.json`.
pub fn sample_flow(cfg: &RunConfig, checkpoint: Option<&Path>, data_dir: &Path, out: &Path) -> Result<FlowSummary> {
    let sf = &cfg.sample_flow;
    let (samples, summary) = match checkpoint {
        None => {
            let den = SyntheticDenoiser::train(&cfg.agp, cfg.backbone.n_layers, cfg.backbone.d_model, sf)?;
            let samples = den.sample(sf.n_samples, &cfg.flow, sf.seed.wrapping_add(1))?;
            let summary = sample_flow::summarize("synthetic", &samples, cfg.flow.n_steps, Some(den.final_loss))?;
            (samples, summary)
        }
        Some(p) => {
            let (mut model, store) = load_policy(&Checkpoint::load(p)?, cfg.eval.use_ema)?;
            model.cfg.flow = cfg.flow.clone();
            let ds = load_dataset(&data_dir.join(suite_file(CLEAN_SUITE)))?;
            let rec = ds.records.first().ok_or_else(|| Error::Data("clean suite is empty".into()))?;
            let scene = rec.eval_scene()?;
            let input = MultimodalInput {
                obs_slots: tokenize_observation(&scene.scene.initial),
                instr_tokens: tokenize_instruction(&scene.scene.task.instruction)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sf.seed);
            let samples = (0..sf.n_samples)
                .map(|_| Ok(model.predict_chunk(&store, &input, &mut rng)?.normalized.row_slice(0).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let summary = sample_flow::summarize(&format!("checkpoint:{}", p.display()), &samples, cfg.flow.n_steps, None)?;
            (samples, summary)
        }
    };
    std::fs::create_dir_all(out)?;
    cfg.write_echo(out)?;
    std::fs::write(out.join("samples.csv"), sample_flow::samples_csv(&samples))?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
