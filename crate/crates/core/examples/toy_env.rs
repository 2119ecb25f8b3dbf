//! The toy manipulation suite: scripted expert, dataset files, replay
//! self-consistency and the seven perturbation categories.
//!
//! Run: `cargo run --release --example toy_env`

use acot::env::dataset::{generate_eval, generate_train, replay_mismatch, Dataset};
use acot::env::perturb::{Category, PerturbParams, PerturbationSuite};
use acot::env::rollout::{rollout, ExpertPolicy, RandomPolicy};
use acot::env::EnvConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let env = EnvConfig::default();
    let (train, stats) = generate_train(&env, 5, 0)?;
    println!("{} demonstrations from {} attempts", train.records.len(), stats.attempts);
    let lengths: Vec<usize> = train.episodes().map(|e| e.len()).collect();
    println!("episode length min {} max {}", lengths.iter().min().unwrap(), lengths.iter().max().unwrap());
    let replayed = train.episodes().filter(|e| replay_mismatch(e, &env).is_none()).count();
    println!("replay reproduces {replayed}/{} episodes exactly", train.records.len());

    let bytes = train.to_bytes()?;
    assert_eq!(Dataset::from_bytes(&bytes)?, train);
    println!("serialized to {} bytes; round trip is exact", bytes.len());

    let expert = ExpertPolicy { cfg: env.clone(), chunk: 8 };
    let random = RandomPolicy { delta_max: env.delta_max, chunk: 8 };
    let params = PerturbParams::default();
    let mut suites: Vec<Option<Category>> = vec![None];
    suites.extend(Category::ALL.map(Some));
    for cat in suites {
        let suite = cat.map(|category| PerturbationSuite { category, params: params.clone() });
        let (ds, _) = generate_eval(&env, 3, suite.as_ref(), 7)?;
        let (mut e, mut r) = (0, 0);
        for rec in &ds.records {
            let scene = rec.eval_scene()?;
            let mut rng = ChaCha8Rng::seed_from_u64(rec.stream);
            e += usize::from(rollout(&expert, &scene, &env, 4, &mut rng)?.success);
            r += usize::from(rollout(&random, &scene, &env, 4, &mut rng)?.success);
        }
        let name = cat.map(|c| c.name()).unwrap_or("clean");
        let sample = &ds.records[0].episode.instruction;
        println!("{name:<11} expert {e:2}/{n}  random {r:2}/{n}  e.g. \"{sample}\"", n = ds.records.len());
    }
    Ok(())
}
