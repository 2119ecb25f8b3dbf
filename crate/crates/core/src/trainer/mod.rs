//! Joint optimization of all modules under `λ1·L_ref + λ2·L_head`.
//!
//! Every batch is a pure function of `(seed, step)`: example indices and
//! flow noise come from a counter-derived stream, so a resumed run replays
//! exactly the batches a straight run would have seen.

pub mod checkpoint;
pub mod optim;

use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agp::training_step_targets;
use crate::backbone::{tokenize_observation, MultimodalInput};
use crate::env::perturb::stream_rng;
use crate::env::{ActionNormalizer, Episode};
use crate::error::{Error, Result};
use crate::policy::{ExampleNoise, Model, ModelConfig, TrainExample, Variant};
use crate::tensor::{GroupSet, ParamStore, Tape};

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, ema_update, global_norm, AdamW, AdamWParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            peak_lr: 3e-3,
            floor_lr: 1e-4,
            warmup_steps: 250,
            total_steps: 5000,
            grad_clip_norm: 1.0,
            ema_decay: 0.999,
            batch_size: 32,
            seed: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("train.lambda1 and train.lambda2 must be >= 0".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "train.warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("train.ema_decay must be in [0, 1)".into()));
        }
        if self.grad_clip_norm <= 0.0 || self.peak_lr < 0.0 || self.floor_lr < 0.0 {
            return Err(Error::Config("train.grad_clip_norm must be > 0 and learning rates >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `floor_lr` at
/// `total_steps`; constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 || step >= cfg.total_steps {
        return if step >= cfg.total_steps && span > 0 { cfg.floor_lr } else { cfg.peak_lr };
    }
    let p = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Everything needed to rebuild a trainer; stored as the checkpoint's
/// config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub variant: Variant,
    pub model: ModelConfig,
    pub delta_max: f64,
    pub train: TrainConfig,
}

impl TrainerSpec {
    pub fn norm(&self) -> ActionNormalizer {
        ActionNormalizer { delta_max: self.delta_max }
    }

    /// Builds the model and its initial weights from `train.seed`.
    pub fn build(&self) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let model = Model::new(&self.model, self.variant, self.norm(), &mut store, &mut rng)?;
        Ok((model, store))
    }
}

/// Supervised examples: one per `(episode, step)` pair.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub examples: Vec<TrainExample>,
}

impl TrainSet {
    pub fn from_episodes<'a>(
        episodes: impl IntoIterator<Item = &'a Episode>,
        model: &ModelConfig,
        norm: &ActionNormalizer,
    ) -> Result<Self> {
        let mut examples = Vec::new();
        for ep in episodes {
            for t in 0..ep.len() {
                let (policy_target, reference) = training_step_targets(ep, t, &model.agp, &model.ear, norm)?;
                examples.push(TrainExample {
                    input: MultimodalInput {
                        obs_slots: tokenize_observation(&ep.states[t]),
                        instr_tokens: ep.instruction_tokens.clone(),
                    },
                    policy_target,
                    ref_target: reference.actions,
                });
            }
        }
        if examples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_ref: Option<f64>,
    pub l_head: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,l_ref,l_head,l_total,lr,grad_norm";

    /// Full-precision CSV row; `l_ref` is empty for variants without a
    /// reference loss.
    pub fn csv_row(&self) -> String {
        let l_ref = self.l_ref.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.step, l_ref, self.l_head, self.l_total, self.lr, self.grad_norm
        )
    }
}

/// A batch: example indices plus per-example noise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub noise: Vec<ExampleNoise>,
}

const BATCH_SALT: u64 = 0xba7c_4e55_0000_0001;

impl Batch {
    /// The batch used at `step` (pure in `seed`, `step`, the data size).
    pub fn sample(data: &TrainSet, seed: u64, step: u64, size: usize) -> Self {
        let mut rng = stream_rng(seed ^ BATCH_SALT, step);
        let indices: Vec<usize> = (0..size).map(|_| rng.gen_range(0..data.len())).collect();
        let noise = indices.iter().map(|&i| ExampleNoise::draw(&data.examples[i], &mut rng)).collect();
        Self { indices, noise }
    }

    pub fn fingerprint(&self, seed: u64, step: u64) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        h.write_u64(seed);
        h.write_u64(step);
        for &i in &self.indices {
            h.write_usize(i);
        }
        h.finish()
    }
}

struct ExampleResult {
    l_ref: Option<f64>,
    l_head: f64,
    l_total: f64,
    grads: Vec<Option<Vec<f64>>>,
}

fn run_example(
    model: &Model,
    store: &ParamStore,
    groups: GroupSet,
    ex: &TrainExample,
    noise: &ExampleNoise,
    cfg: &TrainConfig,
) -> Result<ExampleResult> {
    let mut tape = Tape::with_grad_groups(store, groups);
    let losses = model.example_losses(&mut tape, ex, noise)?;
    let total = model.example_total(&mut tape, &losses, cfg.lambda1, cfg.lambda2)?;
    let l_total = tape.value(total).data()[0];
    let grads = if l_total.is_finite() {
        tape.backward(total)?.param_grads(&tape)
    } else {
        Vec::new()
    };
    Ok(ExampleResult {
        l_ref: losses.l_ref.map(|v| tape.value(v).data()[0]),
        l_head: tape.value(losses.l_head).data()[0],
        l_total,
        grads,
    })
}

pub struct Trainer {
    pub spec: TrainerSpec,
    pub model: Model,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub opt: AdamW,
    /// Completed steps.
    pub step: u64,
    /// Worker threads for per-example gradients; results do not depend on it.
    pub workers: usize,
}

impl Trainer {
    pub fn new(spec: TrainerSpec) -> Result<Self> {
        spec.train.validate()?;
        let (model, params) = spec.build()?;
        let ema = params.clone();
        let opt = AdamW::new(&params);
        Ok(Self { spec, model, params, ema, opt, step: 0, workers: 1 })
    }

    pub fn groups(&self) -> GroupSet {
        self.model.trainable_groups(self.spec.train.lambda1, self.spec.train.lambda2)
    }

    fn batch_results(&self, data: &TrainSet, batch: &Batch) -> Result<Vec<ExampleResult>> {
        let groups = self.groups();
        let cfg = &self.spec.train;
        let work = |i: usize| run_example(&self.model, &self.params, groups, &data.examples[batch.indices[i]], &batch.noise[i], cfg);
        let n = batch.indices.len();
        let workers = self.workers.clamp(1, n.max(1));
        if workers == 1 {
            return (0..n).map(work).collect();
        }
        let chunk = n.div_ceil(workers);
        let parts: Vec<Result<Vec<ExampleResult>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let work = &work;
                    s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(work).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// One optimization step on the batch for the current step index.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepMetrics> {
        let cfg = self.spec.train.clone();
        let batch = Batch::sample(data, cfg.seed, self.step, cfg.batch_size);
        let results = self.batch_results(data, &batch)?;
        let b = results.len() as f64;
        if results.iter().any(|r| !r.l_total.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                fingerprint: batch.fingerprint(cfg.seed, self.step),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        None => *acc = Some(g.clone()),
                    }
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v /= b);
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let lr = lr_at(self.step + 1, &cfg);
        self.opt.step(&mut self.params, &grads, lr, &cfg.adam());
        let groups = self.groups();
        ema_update(&mut self.ema, &self.params, cfg.ema_decay, groups);
        let mean = |f: &dyn Fn(&ExampleResult) -> f64| results.iter().map(f).sum::<f64>() / b;
        let l_ref = results[0].l_ref.is_some().then(|| mean(&|r| r.l_ref.unwrap_or(0.0)));
        let metrics = StepMetrics {
            step: self.step,
            l_ref,
            l_head: mean(&|r| r.l_head),
            l_total: mean(&|r| r.l_total),
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `until` completed steps, calling `on_step` after each.
    pub fn train_until(
        &mut self,
        data: &TrainSet,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let m = self.train_step(data)?;
            on_step(self, &m)?;
        }
        Ok(())
    }

    /// Mean teacher-forced losses over fixed evaluation draws, using the
    /// raw weights.
    pub fn evaluate_losses(&self, data: &TrainSet, n: usize, seed: u64) -> Result<(Option<f64>, f64)> {
        let batch = Batch::sample(data, seed ^ 0x0e7a_1000, 0, n);
        let groups = GroupSet::NONE;
        let mut l_ref = 0.0;
        let mut has_ref = false;
        let mut l_head = 0.0;
        for (i, &idx) in batch.indices.iter().enumerate() {
            let r = run_example(&self.model, &self.params, groups, &data.examples[idx], &batch.noise[i], &self.spec.train)?;
            if let Some(v) = r.l_ref {
                has_ref = true;
                l_ref += v;
            }
            l_head += r.l_head;
        }
        let n = n.max(1) as f64;
        Ok((has_ref.then_some(l_ref / n), l_head / n))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self
            .params
            .ids()
            .map(|id| ParamRecord {
                name: self.params.name(id).to_string(),
                group: self.params.group(id),
                value: self.params.get(id).clone(),
                ema: self.ema.get(id).clone(),
                m: self.opt.m[id.index()].clone(),
                v: self.opt.v[id.index()].clone(),
            })
            .collect();
        Ok(Checkpoint {
            config: serde_json::to_string(&self.spec)?,
            step: self.step,
            adam_t: self.opt.t,
            params,
        })
    }

    /// Rebuilds a trainer mid-run, including optimizer moments.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: TrainerSpec =
            serde_json::from_str(&ck.config).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let mut t = Self::new(spec)?;
        ck.restore_into(&mut t.params, false)?;
        ck.restore_into(&mut t.ema, true)?;
        for p in &ck.params {
            let id = t.params.find(&p.name).expect("restored above");
            if p.m.len() != t.opt.m[id.index()].len() || p.v.len() != t.opt.v[id.index()].len() {
                return Err(Error::Checkpoint(format!("moment size mismatch for '{}'", p.name)));
            }
            t.opt.m[id.index()] = p.m.clone();
            t.opt.v[id.index()] = p.v.clone();
        }
        t.opt.t = ck.adam_t;
        t.step = ck.step;
        Ok(t)
    }
}

/// Model and weights for evaluation; EMA weights unless `use_ema` is false.
pub fn load_policy(ck: &Checkpoint, use_ema: bool) -> Result<(Model, ParamStore)> {
    let spec: TrainerSpec =
        serde_json::from_str(&ck.config).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let (model, mut store) = spec.build()?;
    ck.restore_into(&mut store, use_ema)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agp::AgpConfig;
    use crate::ear::EarConfig;
    use crate::env::dataset::generate_train;
    use crate::env::EnvConfig;
    use crate::tensor::Group;

    fn spec(variant: Variant) -> TrainerSpec {
        let mut m = ModelConfig::default();
        m.backbone.n_layers = 2;
        m.backbone.d_model = 8;
        m.backbone.n_heads = 2;
        m.ear = EarConfig { n_layers: 2, d_model: 8, n_heads: 2, h_ref: 3, ..EarConfig::default() };
        m.iar.d_reduced = 4;
        m.agp = AgpConfig { horizon: 4, d_model: 8, d_g: 8, n_heads: 2, execute_k: 2, ..AgpConfig::default() };
        TrainerSpec {
            variant,
            model: m,
            delta_max: 0.02,
            train: TrainConfig { batch_size: 4, warmup_steps: 2, total_steps: 40, ..TrainConfig::default() },
        }
    }

    fn data(s: &TrainerSpec) -> TrainSet {
        let (ds, _) = generate_train(&EnvConfig::default(), 1, 0).unwrap();
        TrainSet::from_episodes(ds.episodes(), &s.model, &s.norm()).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { peak_lr: 1e-3, floor_lr: 1e-4, warmup_steps: 10, total_steps: 100, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert!((lr_at(100, &c) - 1e-4).abs() < 1e-18);
        assert!(lr_at(55, &c) < 1e-3 && lr_at(55, &c) > 1e-4);
        assert!((lr_at(5, &c) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn defaults_weight_both_losses_equally() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2), (0.5, 0.5));
        assert_eq!(c.ema_decay, 0.999);
        assert_eq!(c.grad_clip_norm, 1.0);
        let bad = TrainConfig { warmup_steps: 10, total_steps: 5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_freeze_their_groups() {
        for (l1, l2, frozen) in [(0.0, 0.5, Group::Ear), (0.5, 0.0, Group::Agp), (0.5, 0.0, Group::Iar)] {
            let mut s = spec(Variant::Full);
            s.train.lambda1 = l1;
            s.train.lambda2 = l2;
            let d = data(&s);
            let mut t = Trainer::new(s).unwrap();
            let before = t.params.clone();
            for _ in 0..3 {
                t.train_step(&d).unwrap();
            }
            let mut moved_other = false;
            for id in t.params.ids() {
                let same = t.params.get(id) == before.get(id);
                if t.params.group(id) == frozen {
                    assert!(same, "{} moved", t.params.name(id));
                } else if !same {
                    moved_other = true;
                }
            }
            assert!(moved_other);
        }
    }

    #[test]
    fn seeded_traces_repeat_and_resume_matches() {
        let s = spec(Variant::Full);
        let d = data(&s);
        let trace = |n: u64| {
            let mut t = Trainer::new(s.clone()).unwrap();
            (0..n).map(|_| t.train_step(&d).unwrap().l_total.to_bits()).collect::<Vec<_>>()
        };
        let straight = trace(8);
        assert_eq!(straight, trace(8));

        let mut t = Trainer::new(s.clone()).unwrap();
        let mut resumed: Vec<u64> = (0..4).map(|_| t.train_step(&d).unwrap().l_total.to_bits()).collect();
        let bytes = t.checkpoint().unwrap().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let mut t2 = Trainer::from_checkpoint(&ck).unwrap();
        resumed.extend((0..4).map(|_| t2.train_step(&d).unwrap().l_total.to_bits()));
        assert_eq!(resumed, straight);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let s = spec(Variant::Iar);
        let d = data(&s);
        let mut a = Trainer::new(s.clone()).unwrap();
        let mut b = Trainer::new(s).unwrap();
        b.workers = 3;
        for _ in 0..2 {
            assert_eq!(a.train_step(&d).unwrap(), b.train_step(&d).unwrap());
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn ema_tracks_parameters_exactly() {
        let s = spec(Variant::Baseline);
        let d = data(&s);
        let mut t = Trainer::new(s).unwrap();
        for _ in 0..3 {
            let prev = t.ema.clone();
            t.train_step(&d).unwrap();
            for id in t.params.ids() {
                for ((e, p), th) in t.ema.get(id).data().iter().zip(prev.get(id).data()).zip(t.params.get(id).data()) {
                    assert_eq!(*e, 0.999 * p + (1.0 - 0.999) * th);
                }
            }
        }
    }

    #[test]
    fn repeated_batch_overfits() {
        let mut s = spec(Variant::Full);
        s.train.peak_lr = 3e-3;
        s.train.warmup_steps = 0;
        s.train.total_steps = 50;
        s.train.floor_lr = 3e-3;
        let full = data(&s);
        let one = TrainSet { examples: vec![full.examples[5].clone()] };
        // a single example with fixed noise: the same batch every step
        let mut t = Trainer::new(s).unwrap();
        let batch = Batch::sample(&one, 0, 0, 1);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let r = t.batch_results(&one, &batch).unwrap();
            losses.push(r[0].l_total);
            let mut grads = r.into_iter().next().unwrap().grads;
            clip_global_norm(&mut grads, 1.0);
            let lr = lr_at(t.step + 1, &t.spec.train);
            let p = t.spec.train.adam();
            t.opt.step(&mut t.params, &grads, lr, &p);
            t.step += 1;
        }
        assert!(losses[49] < 0.2 * losses[0], "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn non_finite_loss_aborts_with_fingerprint() {
        let s = spec(Variant::Baseline);
        let d = data(&s);
        let mut t = Trainer::new(s).unwrap();
        let id = t.params.find("agp.out.b").unwrap();
        t.params.set(id, crate::tensor::Tensor::full(&[1, 3], f64::NAN)).unwrap();
        match t.train_step(&d) {
            Err(Error::NonFiniteLoss { step: 0, fingerprint }) => {
                let b = Batch::sample(&d, 0, 0, 4);
                assert_eq!(fingerprint, b.fingerprint(0, 0));
            }
            other => panic!("{other:?}"),
        }
    }
}
