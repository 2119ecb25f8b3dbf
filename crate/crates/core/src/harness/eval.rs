//! Policy evaluation over stored scene suites.

use std::path::{Path, PathBuf};

use crate::env::dataset::Dataset;
use crate::env::perturb::{stream_rng, Category};
use crate::env::rollout::{rollout, ChunkPolicy};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::harness::results::CLEAN_SUITE;

pub const TRAIN_FILE: &str = "train.acot";

pub fn suite_file(suite: &str) -> String {
    format!("eval-{suite}.acot")
}

/// Suite names in canonical order.
pub fn all_suites() -> Vec<String> {
    let mut s = vec![CLEAN_SUITE.to_string()];
    s.extend(Category::ALL.iter().map(|c| c.name().to_string()));
    s
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Data(format!("dataset {} does not exist", path.display())));
    }
    Dataset::load(path)
}

/// Stored suites under `dir`: clean is required; perturbed ones are
/// included when `perturbed` is set and the file exists.
pub fn discover_suites(dir: &Path, perturbed: bool) -> Result<Vec<(String, PathBuf)>> {
    let clean = dir.join(suite_file(CLEAN_SUITE));
    if !clean.exists() {
        return Err(Error::Data(format!("clean evaluation suite {} does not exist", clean.display())));
    }
    let mut out = vec![(CLEAN_SUITE.to_string(), clean)];
    if perturbed {
        for c in Category::ALL {
            let p = dir.join(suite_file(c.name()));
            if p.exists() {
                out.push((c.name().to_string(), p));
            }
        }
    }
    Ok(out)
}

/// Rejects datasets that cannot be evaluated as `suite` by a policy trained
/// with `delta_max`.
pub fn check_suite(data: &Dataset, suite: &str, delta_max: f64) -> Result<()> {
    if data.header.kind != "eval" {
        return Err(Error::Data(format!("suite '{suite}': dataset kind is '{}', expected 'eval'", data.header.kind)));
    }
    let stored = data.header.suite.map(|c| c.name()).unwrap_or(CLEAN_SUITE);
    if stored != suite {
        return Err(Error::Data(format!("suite '{suite}': file holds suite '{stored}'")));
    }
    if data.header.env.delta_max != delta_max {
        return Err(Error::Data(format!(
            "suite '{suite}': dataset delta_max {} differs from the model's {delta_max}",
            data.header.env.delta_max
        )));
    }
    if data.records.iter().any(|r| r.category.map(|c| c.name()).unwrap_or(CLEAN_SUITE) != suite) {
        return Err(Error::Data(format!("suite '{suite}': records from another suite")));
    }
    Ok(())
}

const ROLLOUT_SALT: u64 = 0x5011_0e57;

/// One rollout per stored scene; returns per-scene success in record order.
/// Scenes are spread over `workers` threads, each with its own counter
/// derived stream, so the outcome does not depend on the worker count.
pub fn evaluate<P: ChunkPolicy + Sync>(
    policy: &P,
    data: &Dataset,
    env: &EnvConfig,
    execute_k: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<bool>> {
    let n = data.records.len();
    let run = |i: usize| -> Result<bool> {
        let r = &data.records[i];
        let scene = r.eval_scene()?;
        let salt = ROLLOUT_SALT ^ r.category.map(|c| c.index() as u64 + 1).unwrap_or(0);
        let mut rng = stream_rng(seed ^ salt, r.stream);
        Ok(rollout(policy, &scene, env, execute_k, &mut rng)?.success)
    };
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(run).collect();
    }
    let parts: Vec<Result<Vec<(usize, bool)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                s.spawn(move || (w..n).step_by(workers).map(|i| run(i).map(|ok| (i, ok))).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = vec![false; n];
    for p in parts {
        for (i, ok) in p? {
            out[i] = ok;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::dataset::generate_eval;
    use crate::env::rollout::{ExpertPolicy, RandomPolicy};

    #[test]
    fn expert_solves_every_clean_scene_for_any_worker_count() {
        let env = EnvConfig::default();
        let (ds, _) = generate_eval(&env, 3, None, 4).unwrap();
        check_suite(&ds, CLEAN_SUITE, env.delta_max).unwrap();
        let expert = ExpertPolicy { cfg: env.clone(), chunk: 8 };
        let a = evaluate(&expert, &ds, &env, 4, 0, 1).unwrap();
        assert!(a.iter().all(|&s| s));
        let random = RandomPolicy { delta_max: env.delta_max, chunk: 8 };
        let r1 = evaluate(&random, &ds, &env, 4, 0, 1).unwrap();
        let r3 = evaluate(&random, &ds, &env, 4, 0, 3).unwrap();
        assert_eq!(r1, r3);
    }

    #[test]
    fn mismatched_suites_are_data_errors() {
        let env = EnvConfig::default();
        let (ds, _) = generate_eval(&env, 1, None, 4).unwrap();
        assert_eq!(check_suite(&ds, "camera", env.delta_max).unwrap_err().exit_code(), 3);
        assert_eq!(check_suite(&ds, CLEAN_SUITE, 0.5).unwrap_err().exit_code(), 3);
    }
}
