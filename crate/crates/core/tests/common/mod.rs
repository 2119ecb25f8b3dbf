//! Helpers shared by the integration targets.
#![allow(dead_code)]

use acot::agp::AgpConfig;
use acot::backbone::tokenize;
use acot::ear::EarConfig;
use acot::env::{sample_scene, ActionNormalizer, EnvConfig, TaskTemplate};
use acot::nn::multi_head_attention;
use acot::policy::{ExampleNoise, Model, ModelConfig, TrainExample, Variant};
use acot::tensor::{check_gradients, check_param_gradients, GradCheckOptions, Group, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Objective = fn(&mut Tape<'static>, &[Var]) -> acot::Result<Var>;

/// Contracts `y` with a fixed pseudo-random weight so every output entry
/// contributes to the scalar.
fn contract(tape: &mut Tape<'static>, y: Var) -> acot::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Each differentiable primitive with its input shapes.
pub fn primitives() -> Vec<(&'static str, Vec<[usize; 2]>, Objective)> {
    vec![
        ("matmul", vec![[3, 4], [4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y)
        }),
        ("matmul_nt", vec![[3, 4], [2, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            contract(t, y)
        }),
        ("add", vec![[2, 3], [2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            contract(t, y)
        }),
        ("sub", vec![[2, 3], [2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            contract(t, y)
        }),
        ("mul", vec![[2, 3], [2, 3]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            contract(t, y)
        }),
        ("scale", vec![[2, 3]], |t, v| {
            let y = t.scale(v[0], -1.7);
            contract(t, y)
        }),
        ("add_row", vec![[3, 4], [1, 4]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            contract(t, y)
        }),
        ("silu", vec![[3, 4]], |t, v| {
            let y = t.silu(v[0]);
            contract(t, y)
        }),
        ("softmax_rows", vec![[3, 5]], |t, v| {
            let y = t.softmax_rows(v[0]);
            contract(t, y)
        }),
        ("layer_norm", vec![[3, 5], [1, 5], [1, 5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            contract(t, y)
        }),
        ("concat_rows", vec![[2, 3], [1, 3]], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            contract(t, y)
        }),
        ("concat_cols", vec![[2, 3], [2, 2]], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            contract(t, y)
        }),
        ("slice_rows", vec![[4, 3]], |t, v| {
            let y = t.slice_rows(v[0], 1, 2)?;
            contract(t, y)
        }),
        ("slice_cols", vec![[3, 5]], |t, v| {
            let y = t.slice_cols(v[0], 2, 3)?;
            contract(t, y)
        }),
        ("mean_rows", vec![[4, 3]], |t, v| {
            let y = t.mean_rows(v[0]);
            contract(t, y)
        }),
        ("mean_cols", vec![[4, 3]], |t, v| {
            let y = t.mean_cols(v[0]);
            contract(t, y)
        }),
        ("sum", vec![[3, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        ("mse", vec![[3, 2], [3, 2]], |t, v| t.mse(v[0], v[1])),
        ("gather_rows", vec![[4, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            contract(t, y)
        }),
        ("transpose", vec![[2, 5]], |t, v| {
            let y = t.transpose(v[0]);
            contract(t, y)
        }),
        ("attention", vec![[2, 4], [3, 4], [3, 5]], |t, v| {
            let y = t.attention(v[0], v[1], v[2])?;
            contract(t, y)
        }),
        ("multi_head_attention", vec![[2, 6], [4, 6], [4, 6]], |t, v| {
            let y = multi_head_attention(t, v[0], v[1], v[2], 3)?;
            contract(t, y)
        }),
    ]
}

/// Worst relative error of each primitive over `points` random inputs.
pub fn primitive_errors(points: u64) -> acot::Result<Vec<(&'static str, f64)>> {
    let opts = GradCheckOptions::default();
    primitives()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst = 0.0f64;
            for p in 0..points {
                let mut rng = ChaCha8Rng::seed_from_u64(p);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
                worst = worst.max(check_gradients(f, &inputs, &opts)?.max_rel_error());
            }
            Ok((name, worst))
        })
        .collect()
}

pub fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.n_layers = 2;
    c.backbone.d_model = 8;
    c.backbone.n_heads = 2;
    c.ear = EarConfig { n_layers: 2, d_model: 8, n_heads: 2, h_ref: 3, ..EarConfig::default() };
    c.iar.d_reduced = 4;
    c.agp = AgpConfig { horizon: 4, d_model: 8, d_g: 8, n_heads: 2, execute_k: 2, ..AgpConfig::default() };
    c
}

/// A tiny model with every parameter jittered away from its initialization,
/// plus one example and its flow noise.
pub fn tiny_setup(variant: Variant, seed: u64) -> (Model, ParamStore, TrainExample, ExampleNoise) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = tiny_model_config();
    let model = Model::new(&cfg, variant, ActionNormalizer { delta_max: 0.02 }, &mut store, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for x in t.data_mut() {
            *x += 0.3 * rng.gen_range(-1.0..1.0);
        }
    }
    let env = EnvConfig::default();
    let template = TaskTemplate::ALL[rng.gen_range(0..TaskTemplate::ALL.len())];
    let scene = sample_scene(template, &env, &mut rng).unwrap();
    let ex = TrainExample {
        input: tokenize(&scene.initial, &scene.task.instruction).unwrap(),
        policy_target: Tensor::randn(&[cfg.agp.horizon, 3], 1.0, &mut rng),
        ref_target: Tensor::randn(&[cfg.ear.h_ref, 3], 1.0, &mut rng),
    };
    let noise = ExampleNoise::draw(&ex, &mut rng);
    (model, store, ex, noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composite {
    Ref,
    Head,
    Total,
}

impl Composite {
    pub const ALL: [Composite; 3] = [Composite::Ref, Composite::Head, Composite::Total];

    pub fn name(self) -> &'static str {
        match self {
            Composite::Ref => "L_ref",
            Composite::Head => "L_head",
            Composite::Total => "L_total",
        }
    }
}

/// Worst relative error of a composite loss over `points` random models,
/// sampling `coords` entries of every parameter tensor.
pub fn composite_error(which: Composite, points: u64, coords: usize) -> acot::Result<f64> {
    let opts = GradCheckOptions { max_coords: Some(coords), ..GradCheckOptions::default() };
    let mut worst = 0.0f64;
    for p in 0..points {
        let (model, store, ex, noise) = tiny_setup(Variant::Full, 100 + p);
        let ids: Vec<_> = store.ids().collect();
        let rep = check_param_gradients(
            &store,
            &ids,
            |tape| {
                let l = model.example_losses(tape, &ex, &noise)?;
                match which {
                    Composite::Ref => Ok(l.l_ref.expect("full model has a reference loss")),
                    Composite::Head => Ok(l.l_head),
                    Composite::Total => model.example_total(tape, &l, 0.7, 1.3),
                }
            },
            &GradCheckOptions { seed: p, ..opts.clone() },
        )?;
        worst = worst.max(rep.max_rel_error());
    }
    Ok(worst)
}

/// Largest absolute gradient on any EAR parameter when only the head loss
/// is back-propagated, with the number of EAR tensors inspected.
pub fn max_ear_grad_from_head(model: &Model, store: &ParamStore, ex: &TrainExample, noise: &ExampleNoise) -> (f64, usize) {
    let mut tape = Tape::new(store);
    let l = model.example_losses(&mut tape, ex, noise).unwrap();
    let grads = tape.backward(l.l_head).unwrap().param_grads(&tape);
    let mut worst = 0.0f64;
    let mut count = 0;
    for id in store.ids().filter(|&id| store.group(id) == Group::Ear) {
        count += 1;
        if let Some(g) = &grads[id.index()] {
            worst = g.iter().fold(worst, |a, b| a.max(b.abs()));
        }
    }
    (worst, count)
}
