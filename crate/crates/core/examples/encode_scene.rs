//! Tokenizes a toy scene and instruction, then exposes the backbone's
//! per-layer key/value cache.
//!
//! Run: `cargo run --release --example encode_scene`

use acot::backbone::{tokenize, Backbone, BackboneConfig};
use acot::env::{sample_scene, EnvConfig, TaskTemplate};
use acot::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = sample_scene(TaskTemplate::ALL[4], &EnvConfig::default(), &mut rng)?;
    println!("instruction: {}", scene.task.instruction);
    println!("agent at {:?}", scene.initial.agent_pos);
    for (i, o) in scene.initial.objects.iter().enumerate() {
        let mark = if i == scene.task.target { "  <- target" } else { "" };
        println!("  {:?} {:?} at [{:.3}, {:.3}]{mark}", o.color, o.shape, o.pos[0], o.pos[1]);
    }

    let input = tokenize(&scene.initial, &scene.task.instruction)?;
    println!("observation slots: {:?}", input.obs_slots);
    println!("instruction tokens: {:?}", input.instr_tokens);
    println!("sequence length {}", input.len());

    let cfg = BackboneConfig::default();
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&cfg, &mut store, &mut rng)?;
    let cache = backbone.encode_values(&store, &input)?;
    for (i, (k, v)) in cache.layers.iter().enumerate() {
        println!("layer {}: K {:?}  V {:?}  |K| {:.3}", i + 1, k.shape(), v.shape(), k.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    println!("{} backbone parameters", store.numel());
    Ok(())
}
