//! The explicit reasoner: ground-truth reference trajectories from an expert
//! episode, a sampled reference from an (untrained) reasoner, and the
//! projection of either into explicit guidance.
//!
//! Run: `cargo run --release --example explicit_reasoner`

use acot::backbone::{tokenize, Backbone, BackboneConfig};
use acot::ear::{extract_reference, Ear, EarConfig, GuidanceProjector};
use acot::env::dataset::generate_train;
use acot::env::{ActionNormalizer, EnvConfig};
use acot::flow::SamplerConfig;
use acot::tensor::{Group, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> acot::Result<()> {
    let env = EnvConfig::default();
    let norm = ActionNormalizer::new(&env);
    let (data, _) = generate_train(&env, 1, 11)?;
    let episode = data.episodes().nth(6).expect("eight episodes");
    println!("episode '{}' with {} expert steps", episode.instruction, episode.len());

    let cfg = EarConfig::default();
    for t in [0, episode.len() / 2, episode.len() - 1] {
        let r = extract_reference(episode, t, &cfg, &norm)?;
        let first: Vec<String> = r.actions.row_slice(0).iter().map(|v| format!("{v:+.2}")).collect();
        let last: Vec<String> = r.actions.row_slice(cfg.h_ref - 1).iter().map(|v| format!("{v:+.2}")).collect();
        println!("t={t:3}: reference {}x{} every {} steps, first [{}] last [{}]", r.actions.rows(), r.actions.cols(), r.shift, first.join(" "), last.join(" "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let bcfg = BackboneConfig::default();
    let backbone = Backbone::new(&bcfg, &mut store, &mut rng)?;
    let ear = Ear::new(&cfg, bcfg.n_layers, bcfg.d_model, &mut store, &mut rng)?;
    let proj = GuidanceProjector::new(&mut store, "ex_proj", Group::Agp, cfg.action_dim, 32, &mut rng);

    let input = tokenize(&episode.states[0], &episode.instruction)?;
    let cache = backbone.encode_values(&store, &input)?;
    let sampled = ear.generate_reference(&store, &cache, &SamplerConfig { n_steps: 10 }, &mut rng)?;
    println!("sampled reference {:?} ({:?})", sampled.actions.shape(), sampled.origin);
    let z = proj.project(&store, &sampled)?;
    println!("explicit guidance {:?}; zero-initialized output layer gives max |z| = {}", z.z_ex.shape(), z.z_ex.data().iter().fold(0.0f64, |a, b| a.max(b.abs())));
    Ok(())
}
