//! The implicit reasoner's three cache-interaction strategies side by side.
//!
//! Run: `cargo run --release --example implicit_reasoner`

use acot::backbone::{tokenize, Backbone, BackboneConfig};
use acot::env::{sample_scene, EnvConfig, TaskTemplate};
use acot::iar::{Iar, IarConfig, IarStrategy};
use acot::tensor::{Group, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = sample_scene(TaskTemplate::ALL[1], &EnvConfig::default(), &mut rng)?;
    let input = tokenize(&scene.initial, &scene.task.instruction)?;
    let bcfg = BackboneConfig::default();
    let d_g = 32;

    for strategy in IarStrategy::ALL {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let backbone = Backbone::new(&bcfg, &mut store, &mut rng)?;
        let cfg = IarConfig { strategy, ..IarConfig::default() };
        let iar = Iar::new(&cfg, bcfg.n_layers, bcfg.d_model, d_g, &mut store, &mut rng)?;
        // give the zero-initialized output layers some weight so rows differ
        for w in iar.output_weights() {
            let shape = store.get(w).shape().to_vec();
            store.set(w, Tensor::randn(&shape, 0.3, &mut rng))?;
        }
        let cache = backbone.encode_values(&store, &input)?;
        let z = iar.extract(&store, &cache)?;
        let norms: Vec<String> = (0..z.z_im.rows())
            .map(|i| format!("{:.3}", z.z_im.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect();
        println!(
            "{:<18} z_im {:?}  per-layer norms [{}]  {} IAR parameters",
            strategy.label(),
            z.z_im.shape(),
            norms.join(", "),
            store.numel_in(Group::Iar)
        );
    }
    Ok(())
}
