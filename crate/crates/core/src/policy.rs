//! The assembled policy: backbone, optional reasoners and the AGP head,
//! with training losses and chunk prediction.

use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agp::{AgpConfig, AgpHead, GuidanceBundle, GuidanceVars, Mode};
use crate::backbone::{
    tokenize_instruction, tokenize_observation, Backbone, BackboneConfig, KvCacheStack, KvCacheVars, MultimodalInput,
};
use crate::ear::{Ear, EarConfig, ExplicitGuidance, GuidanceProjector, RefOrigin};
use crate::env::rollout::{ChunkPolicy, PolicyContext};
use crate::env::{Action, ActionNormalizer};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, make_flow_sample, FlowSample, SamplerConfig};
use crate::iar::{Iar, IarConfig, ImplicitGuidance};
use crate::tensor::{Group, GroupSet, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Ear,
    Iar,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ear, Variant::Iar, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ear => "ear",
            Variant::Iar => "iar",
            Variant::Full => "full",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Ear => "+EAR",
            Variant::Iar => "+IAR",
            Variant::Full => "+EAR+IAR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    pub fn has_ear(self) -> bool {
        matches!(self, Variant::Ear | Variant::Full)
    }

    pub fn has_iar(self) -> bool {
        matches!(self, Variant::Iar | Variant::Full)
    }

    pub fn guided(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ear: EarConfig,
    pub iar: IarConfig,
    pub agp: AgpConfig,
    /// Sampler for the action chunk.
    pub flow: SamplerConfig,
    /// Sampler for the EAR's reference trajectory.
    pub ref_flow: SamplerConfig,
}

/// A predicted chunk of raw environment actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<Action>,
    /// The sampler output in normalized action space.
    pub normalized: Tensor,
    pub shift: usize,
}

/// One supervised query: tokens plus normalized targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub input: MultimodalInput,
    /// `H × action_dim`.
    pub policy_target: Tensor,
    /// `h_ref × action_dim`.
    pub ref_target: Tensor,
}

/// Independent flow draws for the two sub-losses of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleNoise {
    pub reference: FlowSample,
    pub policy: FlowSample,
}

impl ExampleNoise {
    pub fn draw<R: Rng + ?Sized>(ex: &TrainExample, rng: &mut R) -> Self {
        Self {
            reference: make_flow_sample(&ex.ref_target, rng),
            policy: make_flow_sample(&ex.policy_target, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExampleLosses {
    pub l_ref: Option<Var>,
    pub l_head: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub norm: ActionNormalizer,
    pub backbone: Backbone,
    pub ear: Option<Ear>,
    pub ex_proj: Option<GuidanceProjector>,
    pub iar: Option<Iar>,
    pub head: AgpHead,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        variant: Variant,
        norm: ActionNormalizer,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = (cfg.backbone.n_layers, cfg.backbone.d_model);
        if cfg.ear.action_dim != cfg.agp.action_dim {
            return Err(Error::Config("ear.action_dim and agp.action_dim differ".into()));
        }
        let backbone = Backbone::new(&cfg.backbone, store, rng)?;
        let ear = if variant.has_ear() { Some(Ear::new(&cfg.ear, n, d, store, rng)?) } else { None };
        let ex_proj = variant
            .has_ear()
            .then(|| GuidanceProjector::new(store, "agp.ex_proj", Group::Agp, cfg.ear.action_dim, cfg.agp.d_g, rng));
        let iar = if variant.has_iar() { Some(Iar::new(&cfg.iar, n, d, cfg.agp.d_g, store, rng)?) } else { None };
        let head = AgpHead::new(&cfg.agp, n, d, variant.guided(), store, rng)?;
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            norm,
            backbone,
            ear,
            ex_proj,
            iar,
            head,
        })
    }

    /// Groups that receive updates under the given loss weights.
    pub fn trainable_groups(&self, lambda1: f64, lambda2: f64) -> GroupSet {
        let mut g = GroupSet::NONE;
        if !self.cfg.backbone.frozen && (lambda2 > 0.0 || (lambda1 > 0.0 && self.ear.is_some())) {
            g = g.with(Group::Backbone);
        }
        if lambda1 > 0.0 {
            g = g.with(Group::Ear);
        }
        if lambda2 > 0.0 {
            g = g.with(Group::Iar).with(Group::Agp);
        }
        g
    }

    fn zero_ex(&self, tape: &mut Tape<'_>) -> Var {
        tape.constant(Tensor::zeros(&[self.cfg.ear.h_ref, self.cfg.agp.d_g]))
    }

    fn zero_im(&self, tape: &mut Tape<'_>) -> Var {
        tape.constant(Tensor::zeros(&[self.cfg.backbone.n_layers, self.cfg.agp.d_g]))
    }

    /// Teacher-forced guidance: the explicit stream projects the ground-truth
    /// reference, which enters the tape as a constant.
    pub fn teacher_guidance(
        &self,
        tape: &mut Tape<'_>,
        ref_target: &Tensor,
        cache: &KvCacheVars,
    ) -> Result<Option<GuidanceVars>> {
        if !self.variant.guided() {
            return Ok(None);
        }
        let z_ex = match &self.ex_proj {
            Some(p) => {
                let r = tape.constant(ref_target.clone());
                p.forward(tape, r)?
            }
            None => self.zero_ex(tape),
        };
        let z_im = match &self.iar {
            Some(iar) => iar.forward(tape, cache)?,
            None => self.zero_im(tape),
        };
        Ok(Some(GuidanceVars { z_ex, z_im }))
    }

    /// Reference and head flow losses for one example in teacher-forcing mode.
    pub fn example_losses(&self, tape: &mut Tape<'_>, ex: &TrainExample, noise: &ExampleNoise) -> Result<ExampleLosses> {
        let cache = self.backbone.encode(tape, &ex.input)?;
        let l_ref = match &self.ear {
            Some(ear) => {
                let xt = tape.constant(noise.reference.xt.clone());
                let v = ear.forward(tape, xt, noise.reference.t, &cache)?;
                Some(crate::flow::flow_loss(tape, v, &noise.reference)?)
            }
            None => None,
        };
        let guidance = self.teacher_guidance(tape, &ex.ref_target, &cache)?;
        let xt = tape.constant(noise.policy.xt.clone());
        let v = self.head.forward(tape, xt, noise.policy.t, guidance.as_ref(), &cache)?;
        let l_head = crate::flow::flow_loss(tape, v, &noise.policy)?;
        Ok(ExampleLosses { l_ref, l_head })
    }

    /// `λ1·L_ref + λ2·L_head` for one example.
    pub fn example_total(&self, tape: &mut Tape<'_>, losses: &ExampleLosses, lambda1: f64, lambda2: f64) -> Result<Var> {
        let head = tape.scale(losses.l_head, lambda2);
        match losses.l_ref {
            Some(r) => {
                let r = tape.scale(r, lambda1);
                tape.add(r, head)
            }
            None => Ok(head),
        }
    }

    /// Self-conditioned guidance for inference.
    pub fn inference_guidance<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cache: &KvCacheStack,
        rng: &mut R,
    ) -> Result<Option<GuidanceBundle>> {
        if !self.variant.guided() {
            return Ok(None);
        }
        let d_g = self.cfg.agp.d_g;
        let z_ex = match (&self.ear, &self.ex_proj) {
            (Some(ear), Some(proj)) => {
                let r = ear.generate_reference(store, cache, &self.cfg.ref_flow, rng)?;
                proj.project(store, &r)?
            }
            _ => ExplicitGuidance { z_ex: Tensor::zeros(&[self.cfg.ear.h_ref, d_g]) },
        };
        let z_im = match &self.iar {
            Some(iar) => iar.extract(store, cache)?,
            None => ImplicitGuidance { z_im: Tensor::zeros(&[self.cfg.backbone.n_layers, d_g]) },
        };
        let bundle = GuidanceBundle { z_ex, z_im, z_ex_origin: RefOrigin::EarGenerated };
        bundle.check_mode(Mode::SelfConditioned)?;
        Ok(Some(bundle))
    }

    /// Samples one action chunk in self-conditioned mode.
    pub fn predict_chunk<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        input: &MultimodalInput,
        rng: &mut R,
    ) -> Result<ActionChunk> {
        let cache = self.backbone.encode_values(store, input)?;
        let guidance = self.inference_guidance(store, &cache, rng)?;
        let shape = [self.cfg.agp.horizon, self.cfg.agp.action_dim];
        let normalized = euler_sample(
            |x, t| self.head.velocity(store, x, t, guidance.as_ref(), &cache),
            &shape,
            &self.cfg.flow,
            "policy",
            rng,
        )?;
        let actions = (0..normalized.rows()).map(|i| self.norm.denormalize(normalized.row_slice(i))).collect();
        Ok(ActionChunk {
            actions,
            normalized,
            shift: self.cfg.agp.action_shift,
        })
    }
}

/// A trained model driving rollouts from the observed state.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn predict(&self, ctx: &PolicyContext<'_>, mut rng: &mut dyn RngCore) -> Result<Vec<Action>> {
        let input = MultimodalInput {
            obs_slots: tokenize_observation(ctx.observed),
            instr_tokens: tokenize_instruction(&ctx.task.instruction)?,
        };
        Ok(self.model.predict_chunk(self.store, &input, &mut rng)?.actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tokenize;
    use crate::env::{sample_scene, EnvConfig, TaskTemplate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.n_layers = 2;
        c.backbone.d_model = 8;
        c.backbone.n_heads = 2;
        c.ear = EarConfig { n_layers: 2, d_model: 8, n_heads: 2, h_ref: 3, ..EarConfig::default() };
        c.iar.d_reduced = 4;
        c.agp = AgpConfig { horizon: 4, d_model: 8, d_g: 8, n_heads: 2, execute_k: 2, ..AgpConfig::default() };
        c
    }

    fn example(rng: &mut ChaCha8Rng) -> TrainExample {
        let env = EnvConfig::default();
        let scene = sample_scene(TaskTemplate::ALL[3], &env, rng).unwrap();
        TrainExample {
            input: tokenize(&scene.initial, &scene.task.instruction).unwrap(),
            policy_target: Tensor::randn(&[4, 3], 1.0, rng),
            ref_target: Tensor::randn(&[3, 3], 1.0, rng),
        }
    }

    #[test]
    fn variants_own_their_modules() {
        for v in Variant::ALL {
            let mut store = ParamStore::new();
            let m = Model::new(&tiny_config(), v, ActionNormalizer { delta_max: 0.02 }, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.ear.is_some(), v.has_ear());
            assert_eq!(m.iar.is_some(), v.has_iar());
            assert_eq!(store.numel_in(Group::Ear) > 0, v.has_ear());
            assert_eq!(store.numel_in(Group::Iar) > 0, v.has_iar());
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(Variant::parse(v.label()).unwrap(), v);
        }
    }

    #[test]
    fn head_loss_never_reaches_reasoner_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = Model::new(&tiny_config(), Variant::Full, ActionNormalizer { delta_max: 0.02 }, &mut store, &mut rng).unwrap();
        // make guidance live so the head depends on the projected reference
        let w = m.ex_proj.as_ref().unwrap().mlp.fc2.w;
        store.set(w, Tensor::randn(&[8, 8], 1.0, &mut rng)).unwrap();
        let ex = example(&mut rng);
        let noise = ExampleNoise::draw(&ex, &mut rng);
        let mut tape = Tape::new(&store);
        let l = m.example_losses(&mut tape, &ex, &noise).unwrap();
        let grads = tape.backward(l.l_head).unwrap();
        let pg = grads.param_grads(&tape);
        let mut ear_params = 0;
        for id in store.ids() {
            if store.group(id) == Group::Ear {
                ear_params += 1;
                let max = pg[id.index()].as_ref().map(|g| g.iter().fold(0.0f64, |a, b| a.max(b.abs()))).unwrap_or(0.0);
                assert_eq!(max, 0.0, "{}", store.name(id));
            }
        }
        assert!(ear_params > 0);
        assert!(pg[w.index()].as_ref().unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn prediction_is_seeded_and_ablations_still_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = example(&mut rng);
        for v in Variant::ALL {
            let mut store = ParamStore::new();
            let m = Model::new(&tiny_config(), v, ActionNormalizer { delta_max: 0.02 }, &mut store, &mut rng).unwrap();
            let a = m.predict_chunk(&store, &ex.input, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = m.predict_chunk(&store, &ex.input, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.actions.len(), 4);
            assert!(a.normalized.is_finite());
        }
    }
}
