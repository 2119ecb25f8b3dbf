mod common;

use acot::backbone::{tokenize, Backbone, BackboneConfig};
use acot::env::{sample_scene, EnvConfig, TaskTemplate};
use acot::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows_permuted(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row_slice(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, m in 1usize..5, n in 1usize..9, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::randn(&[m, n], scale, &mut rng));
        let y = tape.softmax_rows(x);
        for i in 0..m {
            let s: f64 = tape.value(y).row_slice(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn attention_ignores_joint_key_value_order(seed in 0u64..10_000, sq in 1usize..4, sk in 1usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[sq, d], 1.0, &mut rng);
        let k = Tensor::randn(&[sk, d], 1.0, &mut rng);
        let v = Tensor::randn(&[sk, 3], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..sk).collect();
        perm.shuffle(&mut rng);
        let run = |k: Tensor, v: Tensor| {
            let mut tape = Tape::detached();
            let (q, k, v) = (tape.constant(q.clone()), tape.constant(k), tape.constant(v));
            let o = tape.attention(q, k, v).unwrap();
            tape.value(o).clone()
        };
        let a = run(k.clone(), v.clone());
        let b = run(rows_permuted(&k, &perm), rows_permuted(&v, &perm));
        prop_assert!(a.max_abs_diff(&b) <= 1e-12, "{}", a.max_abs_diff(&b));
    }
}

fn small_backbone(seed: u64) -> (Backbone, ParamStore) {
    let cfg = BackboneConfig { n_layers: 3, d_model: 16, n_heads: 4, ..BackboneConfig::default() };
    let mut store = ParamStore::new();
    let b = Backbone::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (b, store)
}

#[test]
fn first_layer_keys_recompute_by_hand() {
    let (backbone, store) = small_backbone(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene = sample_scene(TaskTemplate::ALL[5], &EnvConfig::default(), &mut rng).unwrap();
    let input = tokenize(&scene.initial, &scene.task.instruction).unwrap();
    let cache = backbone.encode_values(&store, &input).unwrap();
    assert_eq!(cache.n_layers(), 3);
    assert_eq!(cache.seq_len(), input.len());

    let tok = store.get(store.find("backbone.tok_emb").unwrap());
    let pos = store.get(store.find("backbone.pos_emb").unwrap());
    let (gamma, beta, wk) = backbone.first_layer_key_params();
    let (gamma, beta, wk) = (store.get(gamma), store.get(beta), store.get(wk));
    let d = 16;
    let slots: Vec<Vec<u32>> = input.obs_slots.iter().cloned().chain(input.instr_tokens.iter().map(|&t| vec![t])).collect();
    assert_eq!(slots.len(), input.len());
    for (r, slot) in slots.iter().enumerate() {
        let h: Vec<f64> = (0..d).map(|j| slot.iter().map(|&t| tok.get(t as usize, j)).sum::<f64>() + pos.get(r, j)).collect();
        let mean = h.iter().sum::<f64>() / d as f64;
        let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let a: Vec<f64> = (0..d)
            .map(|j| (h[j] - mean) / (var + 1e-5).sqrt() * gamma.get(0, j) + beta.get(0, j))
            .collect();
        for c in 0..d {
            let k: f64 = (0..d).map(|j| a[j] * wk.get(j, c)).sum();
            assert!((k - cache.layers[0].0.get(r, c)).abs() < 1e-10, "row {r} col {c}");
        }
    }
}

#[test]
fn forward_passes_are_bit_identical() {
    let (backbone, store) = small_backbone(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = sample_scene(TaskTemplate::ALL[0], &EnvConfig::default(), &mut rng).unwrap();
    let input = tokenize(&scene.initial, &scene.task.instruction).unwrap();
    let a = backbone.encode_values(&store, &input).unwrap();
    let b = backbone.encode_values(&store, &input).unwrap();
    assert_eq!(a, b);
}

#[test]
fn teacher_forced_head_loss_leaves_ear_gradients_at_zero() {
    for seed in 0..5 {
        let (model, store, ex, noise) = common::tiny_setup(acot::policy::Variant::Full, seed);
        let (worst, count) = common::max_ear_grad_from_head(&model, &store, &ex, &noise);
        assert!(count > 0);
        assert_eq!(worst, 0.0);
    }
}
