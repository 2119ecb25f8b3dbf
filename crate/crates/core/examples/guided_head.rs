//! The action-guided head: one flow-matching training loss, then Euler
//! sampling of an action chunk with and without guidance.
//!
//! Run: `cargo run --release --example guided_head`

use acot::backbone::tokenize;
use acot::env::{sample_scene, ActionNormalizer, EnvConfig, TaskTemplate};
use acot::policy::{ExampleNoise, Model, ModelConfig, TrainExample, Variant};
use acot::tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let env = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = sample_scene(TaskTemplate::ALL[6], &env, &mut rng)?;
    let input = tokenize(&scene.initial, &scene.task.instruction)?;
    let cfg = ModelConfig::default();

    for variant in Variant::ALL {
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, variant, ActionNormalizer::new(&env), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;

        // teacher-forced losses on a random target chunk
        let ex = TrainExample {
            input: input.clone(),
            policy_target: Tensor::randn(&[cfg.agp.horizon, cfg.agp.action_dim], 1.0, &mut rng),
            ref_target: Tensor::randn(&[cfg.ear.h_ref, cfg.ear.action_dim], 1.0, &mut rng),
        };
        let noise = ExampleNoise::draw(&ex, &mut rng);
        let mut tape = Tape::new(&store);
        let losses = model.example_losses(&mut tape, &ex, &noise)?;
        let l_ref = losses.l_ref.map(|v| format!("{:.3}", tape.value(v).data()[0])).unwrap_or_else(|| "-".into());

        // self-conditioned sampling
        let chunk = model.predict_chunk(&store, &input, &mut ChaCha8Rng::seed_from_u64(9))?;
        let a = chunk.actions[0];
        println!(
            "{:<9} params {:>6}  L_ref {l_ref:>6}  L_head {:.3}  first action [{:+.4}, {:+.4}, {:.2}]",
            variant.label(),
            store.numel(),
            tape.value(losses.l_head).data()[0],
            a[0],
            a[1],
            a[2]
        );
    }
    Ok(())
}
