//! Explicit action reasoner: a small transformer that denoises a coarse
//! reference trajectory, consulting backbone cache layer `i` in its own
//! layer `i`, plus the per-step projector that turns a reference into
//! explicit guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{KvCacheStack, KvCacheVars};
use crate::env::{subsample_actions, ActionNormalizer, Episode, ACTION_DIM};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::nn::{add_positions, sinusoidal_embedding, BlockTrace, LayerNorm, Linear, Mlp, ParallelCacheBlock};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub h_ref: usize,
    pub ref_shift: usize,
    pub action_dim: usize,
    pub ffn_mult: usize,
}

impl Default for EarConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            h_ref: 8,
            ref_shift: 2,
            action_dim: ACTION_DIM,
            ffn_mult: 2,
        }
    }
}

impl EarConfig {
    pub fn validate(&self, backbone_layers: usize, backbone_d: usize) -> Result<()> {
        if self.n_layers != backbone_layers {
            return Err(Error::Config(format!(
                "ear.n_layers {} must equal backbone.n_layers {backbone_layers}",
                self.n_layers
            )));
        }
        if self.h_ref == 0 || self.ref_shift == 0 {
            return Err(Error::Config("ear.h_ref and ear.ref_shift must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || !backbone_d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "ear.n_heads {} must divide ear.d_model {} and backbone.d_model {backbone_d}",
                self.n_heads, self.d_model
            )));
        }
        if self.action_dim == 0 {
            return Err(Error::Config("ear.action_dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefOrigin {
    ExpertSubsampled,
    EarGenerated,
}

/// A reference action sequence in normalized action space.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    /// `h_ref × action_dim`.
    pub actions: Tensor,
    pub shift: usize,
    pub origin: RefOrigin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitGuidance {
    /// `h_ref × d_g`.
    pub z_ex: Tensor,
}

/// Ground-truth reference: expert actions at `t, t + shift, …`, holding the
/// final action past the episode end.
pub fn extract_reference(
    episode: &Episode,
    t: usize,
    cfg: &EarConfig,
    norm: &ActionNormalizer,
) -> Result<ReferenceTrajectory> {
    let acts = subsample_actions(&episode.expert_actions, t, cfg.ref_shift, cfg.h_ref)?;
    Ok(ReferenceTrajectory {
        actions: norm.to_tensor(&acts),
        shift: cfg.ref_shift,
        origin: RefOrigin::ExpertSubsampled,
    })
}

/// Values recorded during one EAR pass.
#[derive(Clone, Debug)]
pub struct EarTrace {
    pub h0: Var,
    pub layers: Vec<BlockTrace>,
    pub velocity: Var,
}

#[derive(Clone, Debug)]
pub struct Ear {
    pub cfg: EarConfig,
    in_proj: Linear,
    pos_emb: ParamId,
    pub blocks: Vec<ParallelCacheBlock>,
    ln_out: LayerNorm,
    out: Linear,
}

impl Ear {
    pub fn new<R: Rng + ?Sized>(
        cfg: &EarConfig,
        backbone_layers: usize,
        backbone_d: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(backbone_layers, backbone_d)?;
        let g = Group::Ear;
        let d = cfg.d_model;
        let in_proj = Linear::new(store, "ear.in_proj", g, cfg.action_dim, d, true, 1.0, rng);
        let pos_emb = store.add("ear.pos_emb", g, Tensor::randn(&[cfg.h_ref, d], 0.1, rng));
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                ParallelCacheBlock::new(store, &format!("ear.layer{i}"), g, d, backbone_d, cfg.n_heads, cfg.ffn_mult, rng)
            })
            .collect();
        let ln_out = LayerNorm::new(store, "ear.ln_out", g, d);
        let out = Linear::new(store, "ear.out", g, d, cfg.action_dim, true, 1.0, rng);
        Ok(Self {
            cfg: cfg.clone(),
            in_proj,
            pos_emb,
            blocks,
            ln_out,
            out,
        })
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_>, noisy: Var, t: f64, cache: &KvCacheVars) -> Result<EarTrace> {
        if cache.n_layers() != self.blocks.len() {
            return Err(Error::Config(format!(
                "cache has {} layers but the reasoner has {}",
                cache.n_layers(),
                self.blocks.len()
            )));
        }
        let shape = tape.shape(noisy).to_vec();
        if shape != [self.cfg.h_ref, self.cfg.action_dim] {
            return Err(Error::shape("ear_forward", &shape, &[self.cfg.h_ref, self.cfg.action_dim]));
        }
        let x = self.in_proj.forward(tape, noisy)?;
        let x = add_positions(tape, x, self.pos_emb)?;
        let temb = tape.constant(sinusoidal_embedding(t, self.cfg.d_model));
        let h0 = tape.add_row(x, temb)?;
        let mut h = h0;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (block, &(k, v)) in self.blocks.iter().zip(&cache.layers) {
            let tr = block.forward_traced(tape, h, k, v)?;
            h = tr.out;
            layers.push(tr);
        }
        let y = self.ln_out.forward(tape, h)?;
        let velocity = self.out.forward(tape, y)?;
        Ok(EarTrace { h0, layers, velocity })
    }

    /// Velocity field for a noisy `h_ref × action_dim` reference at time `t`.
    pub fn forward(&self, tape: &mut Tape<'_>, noisy: Var, t: f64, cache: &KvCacheVars) -> Result<Var> {
        Ok(self.forward_traced(tape, noisy, t, cache)?.velocity)
    }

    pub fn velocity(&self, store: &ParamStore, x: &Tensor, t: f64, cache: &KvCacheStack) -> Result<Tensor> {
        let mut tape = Tape::no_grad(store);
        let c = cache.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let v = self.forward(&mut tape, xv, t, &c)?;
        Ok(tape.value(v).clone())
    }

    /// Samples a reference trajectory with the Euler sampler.
    pub fn generate_reference<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cache: &KvCacheStack,
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<ReferenceTrajectory> {
        let actions = euler_sample(
            |x, t| self.velocity(store, x, t, cache),
            &[self.cfg.h_ref, self.cfg.action_dim],
            sampler,
            "reference",
            rng,
        )?;
        Ok(ReferenceTrajectory {
            actions,
            shift: self.cfg.ref_shift,
            origin: RefOrigin::EarGenerated,
        })
    }
}

/// Per-step MLP lifting reference actions to the guidance width.
#[derive(Clone, Debug)]
pub struct GuidanceProjector {
    pub mlp: Mlp,
    pub d_g: usize,
}

impl GuidanceProjector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        action_dim: usize,
        d_g: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, group, (action_dim, d_g, d_g), true, rng),
            d_g,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, actions: Var) -> Result<Var> {
        self.mlp.forward(tape, actions)
    }

    pub fn project(&self, store: &ParamStore, reference: &ReferenceTrajectory) -> Result<ExplicitGuidance> {
        let mut tape = Tape::no_grad(store);
        let a = tape.constant(reference.actions.clone());
        let z = self.forward(&mut tape, a)?;
        Ok(ExplicitGuidance { z_ex: tape.value(z).clone() })
    }
}
