//! Action-guided prediction head.
//!
//! Noisy actions become action queries; two cross-attentions read the
//! explicit and implicit guidance, a self-attention block fuses both
//! streams over `2H` tokens, and the first `H` fused tokens pass through
//! cache-conditioned layers to a linear velocity readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{KvCacheStack, KvCacheVars};
use crate::ear::{extract_reference, EarConfig, ExplicitGuidance, RefOrigin, ReferenceTrajectory};
use crate::env::{subsample_actions, ActionNormalizer, Episode, ACTION_DIM};
use crate::error::{Error, Result};
use crate::iar::ImplicitGuidance;
use crate::nn::{add_positions, sinusoidal_embedding, Attention, LayerNorm, Linear, Mlp, ParallelCacheBlock};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Explicit guidance comes from ground-truth references.
    TeacherForcing,
    /// Explicit guidance comes from the reasoner's own samples.
    SelfConditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgpConfig {
    pub horizon: usize,
    pub action_shift: usize,
    pub action_dim: usize,
    pub d_model: usize,
    /// Guidance width shared by both reasoners.
    pub d_g: usize,
    pub n_heads: usize,
    pub n_fusion_layers: usize,
    pub ffn_mult: usize,
    /// Actions executed from each chunk before re-planning.
    pub execute_k: usize,
}

impl Default for AgpConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_shift: 1,
            action_dim: ACTION_DIM,
            d_model: 32,
            d_g: 32,
            n_heads: 4,
            n_fusion_layers: 1,
            ffn_mult: 2,
            execute_k: 4,
        }
    }
}

impl AgpConfig {
    pub fn validate(&self, backbone_d: usize) -> Result<()> {
        if self.horizon == 0 || self.action_shift == 0 {
            return Err(Error::Config("agp.horizon and agp.action_shift must be >= 1".into()));
        }
        if self.execute_k == 0 || self.execute_k > self.horizon {
            return Err(Error::Config(format!(
                "agp.execute_k {} must be in 1..={}",
                self.execute_k, self.horizon
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || !backbone_d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "agp.n_heads {} must divide agp.d_model {} and backbone.d_model {backbone_d}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_g == 0 || self.action_dim == 0 {
            return Err(Error::Config("agp.d_g and agp.action_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Explicit and implicit guidance as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBundle {
    pub z_ex: ExplicitGuidance,
    pub z_im: ImplicitGuidance,
    pub z_ex_origin: RefOrigin,
}

impl GuidanceBundle {
    pub fn zeros(h_ref: usize, n_layers: usize, d_g: usize, origin: RefOrigin) -> Self {
        Self {
            z_ex: ExplicitGuidance { z_ex: Tensor::zeros(&[h_ref, d_g]) },
            z_im: ImplicitGuidance { z_im: Tensor::zeros(&[n_layers, d_g]) },
            z_ex_origin: origin,
        }
    }

    /// Checks the origin against the mode it is consumed in.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        let expected = match mode {
            Mode::TeacherForcing => RefOrigin::ExpertSubsampled,
            Mode::SelfConditioned => RefOrigin::EarGenerated,
        };
        if self.z_ex_origin != expected {
            return Err(Error::Config(format!(
                "{:?} guidance consumed in {mode:?} mode",
                self.z_ex_origin
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<'_>) -> GuidanceVars {
        GuidanceVars {
            z_ex: tape.constant(self.z_ex.z_ex.clone()),
            z_im: tape.constant(self.z_im.z_im.clone()),
        }
    }
}

/// Guidance recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceVars {
    pub z_ex: Var,
    pub z_im: Var,
}

#[derive(Clone, Debug)]
struct FusionLayer {
    ln: LayerNorm,
    attn: Attention,
}

/// Dual cross-attention plus self-attention fusion.
#[derive(Clone, Debug)]
pub struct GuidedFusion {
    ln_q: LayerNorm,
    pub ex_attn: Attention,
    pub im_attn: Attention,
    fusion: Vec<FusionLayer>,
}

/// Intermediate values of one guided pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub queries: Var,
    pub s_ex: Var,
    pub s_im: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct AgpHead {
    pub cfg: AgpConfig,
    act_mlp: Mlp,
    pos_emb: ParamId,
    pub guided: Option<GuidedFusion>,
    pub blocks: Vec<ParallelCacheBlock>,
    ln_out: LayerNorm,
    out: Linear,
}

impl AgpHead {
    /// `guided == false` builds the guidance-free baseline head.
    pub fn new<R: Rng + ?Sized>(
        cfg: &AgpConfig,
        backbone_layers: usize,
        backbone_d: usize,
        guided: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(backbone_d)?;
        let g = Group::Agp;
        let d = cfg.d_model;
        let act_mlp = Mlp::new(store, "agp.act_mlp", g, (cfg.action_dim, d, d), false, rng);
        let pos_emb = store.add("agp.pos_emb", g, Tensor::randn(&[cfg.horizon, d], 0.1, rng));
        let guided = guided.then(|| GuidedFusion {
            ln_q: LayerNorm::new(store, "agp.ln_q", g, d),
            ex_attn: Attention::new(store, "agp.ex_attn", g, d, cfg.d_g, d, cfg.n_heads, 1.0, rng),
            im_attn: Attention::new(store, "agp.im_attn", g, d, cfg.d_g, d, cfg.n_heads, 1.0, rng),
            fusion: (0..cfg.n_fusion_layers)
                .map(|i| FusionLayer {
                    ln: LayerNorm::new(store, &format!("agp.fusion{i}.ln"), g, d),
                    attn: Attention::new(store, &format!("agp.fusion{i}.attn"), g, d, d, d, cfg.n_heads, 0.0, rng),
                })
                .collect(),
        });
        let blocks = (0..backbone_layers)
            .map(|i| ParallelCacheBlock::new(store, &format!("agp.layer{i}"), g, d, backbone_d, cfg.n_heads, cfg.ffn_mult, rng))
            .collect();
        let ln_out = LayerNorm::new(store, "agp.ln_out", g, d);
        let out = Linear::new(store, "agp.out", g, d, cfg.action_dim, true, 1.0, rng);
        Ok(Self {
            cfg: cfg.clone(),
            act_mlp,
            pos_emb,
            guided,
            blocks,
            ln_out,
            out,
        })
    }

    /// Action queries: embedded noisy actions plus positions and time.
    pub fn queries(&self, tape: &mut Tape<'_>, noisy: Var, t: f64) -> Result<Var> {
        let shape = tape.shape(noisy).to_vec();
        if shape != [self.cfg.horizon, self.cfg.action_dim] {
            return Err(Error::shape("agp_forward", &shape, &[self.cfg.horizon, self.cfg.action_dim]));
        }
        let q = self.act_mlp.forward(tape, noisy)?;
        let q = add_positions(tape, q, self.pos_emb)?;
        let temb = tape.constant(sinusoidal_embedding(t, self.cfg.d_model));
        tape.add_row(q, temb)
    }

    /// Guidance retrieval and fusion on top of precomputed queries.
    pub fn fuse(&self, tape: &mut Tape<'_>, queries: Var, guidance: &GuidanceVars) -> Result<FusionTrace> {
        let gf = self
            .guided
            .as_ref()
            .ok_or_else(|| Error::Config("guidance given to a baseline head".into()))?;
        for (name, z) in [("z_ex", guidance.z_ex), ("z_im", guidance.z_im)] {
            if tape.value(z).cols() != self.cfg.d_g {
                return Err(Error::Config(format!(
                    "{name} width {} does not match agp.d_g {}",
                    tape.value(z).cols(),
                    self.cfg.d_g
                )));
            }
        }
        let a = gf.ln_q.forward(tape, queries)?;
        let ex = gf.ex_attn.forward(tape, a, guidance.z_ex)?;
        let im = gf.im_attn.forward(tape, a, guidance.z_im)?;
        let s_ex = tape.add(queries, ex)?;
        let s_im = tape.add(queries, im)?;
        let mut h = tape.concat_rows(&[s_ex, s_im])?;
        for layer in &gf.fusion {
            let n = layer.ln.forward(tape, h)?;
            let o = layer.attn.forward(tape, n, n)?;
            h = tape.add(h, o)?;
        }
        let fused = tape.slice_rows(h, 0, self.cfg.horizon)?;
        Ok(FusionTrace { queries, s_ex, s_im, fused })
    }

    /// Velocity for `H × action_dim` noisy actions. `guidance == None` skips
    /// the fusion stage.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        noisy: Var,
        t: f64,
        guidance: Option<&GuidanceVars>,
        cache: &KvCacheVars,
    ) -> Result<Var> {
        if cache.n_layers() != self.blocks.len() {
            return Err(Error::Config(format!(
                "cache has {} layers but the head has {}",
                cache.n_layers(),
                self.blocks.len()
            )));
        }
        let q = self.queries(tape, noisy, t)?;
        let mut h = match guidance {
            Some(g) => self.fuse(tape, q, g)?.fused,
            None => q,
        };
        for (block, &(k, v)) in self.blocks.iter().zip(&cache.layers) {
            h = block.forward(tape, h, k, v)?;
        }
        let y = self.ln_out.forward(tape, h)?;
        self.out.forward(tape, y)
    }

    pub fn velocity(
        &self,
        store: &ParamStore,
        x: &Tensor,
        t: f64,
        guidance: Option<&GuidanceBundle>,
        cache: &KvCacheStack,
    ) -> Result<Tensor> {
        let mut tape = Tape::no_grad(store);
        let c = cache.bind(&mut tape);
        let g = guidance.map(|g| g.bind(&mut tape));
        let xv = tape.constant(x.clone());
        let v = self.forward(&mut tape, xv, t, g.as_ref(), &c)?;
        Ok(tape.value(v).clone())
    }
}

/// Normalized policy and reference targets at step `t` of an episode.
pub fn training_step_targets(
    episode: &Episode,
    t: usize,
    cfg: &AgpConfig,
    ear_cfg: &EarConfig,
    norm: &ActionNormalizer,
) -> Result<(Tensor, ReferenceTrajectory)> {
    let policy = subsample_actions(&episode.expert_actions, t, cfg.action_shift, cfg.horizon)?;
    let reference = extract_reference(episode, t, ear_cfg, norm)?;
    Ok((norm.to_tensor(&policy), reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskTemplate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cfg() -> AgpConfig {
        AgpConfig { horizon: 3, d_model: 8, d_g: 6, n_heads: 2, execute_k: 2, ..AgpConfig::default() }
    }

    fn random_cache(n: usize, s: usize, d: usize, rng: &mut ChaCha8Rng) -> KvCacheStack {
        KvCacheStack {
            layers: (0..n)
                .map(|_| (Arc::new(Tensor::randn(&[s, d], 1.0, rng)), Arc::new(Tensor::randn(&[s, d], 1.0, rng))))
                .collect(),
        }
    }

    fn random_bundle(rng: &mut ChaCha8Rng) -> GuidanceBundle {
        GuidanceBundle {
            z_ex: ExplicitGuidance { z_ex: Tensor::randn(&[4, 6], 1.0, rng) },
            z_im: ImplicitGuidance { z_im: Tensor::randn(&[2, 6], 1.0, rng) },
            z_ex_origin: RefOrigin::ExpertSubsampled,
        }
    }

    #[test]
    fn output_shape_and_width_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = AgpHead::new(&cfg(), 2, 8, true, &mut store, &mut rng).unwrap();
        let cache = random_cache(2, 5, 8, &mut rng);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let g = random_bundle(&mut rng);
        assert_eq!(head.velocity(&store, &x, 0.2, Some(&g), &cache).unwrap().shape(), &[3, 3]);
        let mut bad = g.clone();
        bad.z_im.z_im = Tensor::zeros(&[2, 5]);
        assert!(matches!(head.velocity(&store, &x, 0.2, Some(&bad), &cache), Err(Error::Config(_))));
    }

    #[test]
    fn zero_guidance_reproduces_baseline_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = AgpHead::new(&cfg(), 2, 8, true, &mut store, &mut rng).unwrap();
        let cache = random_cache(2, 5, 8, &mut rng);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let zero = GuidanceBundle::zeros(4, 2, 6, RefOrigin::EarGenerated);
        let guided = head.velocity(&store, &x, 0.6, Some(&zero), &cache).unwrap();
        let baseline = head.velocity(&store, &x, 0.6, None, &cache).unwrap();
        assert_eq!(guided, baseline);

        // a separately built baseline head with copied weights agrees too
        let mut bstore = ParamStore::new();
        let bhead = AgpHead::new(&cfg(), 2, 8, false, &mut bstore, &mut rng).unwrap();
        for id in bstore.ids().collect::<Vec<_>>() {
            let src = store.find(bstore.name(id)).unwrap();
            bstore.set(id, store.get(src).clone()).unwrap();
        }
        assert_eq!(bhead.velocity(&bstore, &x, 0.6, None, &cache).unwrap(), baseline);
    }

    #[test]
    fn guidance_row_permutation_leaves_streams_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = AgpHead::new(&cfg(), 2, 8, true, &mut store, &mut rng).unwrap();
        let g = random_bundle(&mut rng);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let streams = |g: &GuidanceBundle| {
            let mut tape = Tape::no_grad(&store);
            let gv = g.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let q = head.queries(&mut tape, xv, 0.3).unwrap();
            let tr = head.fuse(&mut tape, q, &gv).unwrap();
            (tape.value(tr.s_ex).clone(), tape.value(tr.s_im).clone())
        };
        let rev = |t: &Tensor| Tensor::from_rows(&(0..t.rows()).rev().map(|i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (ex, im) = streams(&g);
        let mut p = g.clone();
        p.z_ex.z_ex = rev(&g.z_ex.z_ex);
        p.z_im.z_im = rev(&g.z_im.z_im);
        let (ex2, im2) = streams(&p);
        assert!(ex.max_abs_diff(&ex2) < 1e-12);
        assert!(im.max_abs_diff(&im2) < 1e-12);
    }

    #[test]
    fn mode_and_origin_must_agree() {
        let g = GuidanceBundle::zeros(2, 2, 4, RefOrigin::ExpertSubsampled);
        assert!(g.check_mode(Mode::TeacherForcing).is_ok());
        assert!(g.check_mode(Mode::SelfConditioned).is_err());
    }

    #[test]
    fn targets_follow_both_subsampling_rules() {
        let a: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, -(i as f64), 0.0]).collect();
        let ep = Episode {
            template: TaskTemplate::ALL[0],
            target: 0,
            instruction: String::new(),
            instruction_tokens: vec![],
            states: vec![],
            expert_actions: a.clone(),
            success: true,
        };
        let norm = ActionNormalizer { delta_max: 1.0 };
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect::<Vec<_>>();
        let want = |idx: &[usize]| idx.iter().map(|&i| norm.normalize(&a[i]).to_vec()).collect::<Vec<_>>();
        let pc = AgpConfig { horizon: 2, action_shift: 1, execute_k: 1, ..AgpConfig::default() };
        let ec = EarConfig { h_ref: 2, ref_shift: 2, ..EarConfig::default() };
        let (p, r) = training_step_targets(&ep, 0, &pc, &ec, &norm).unwrap();
        assert_eq!(rows(&p), want(&[0, 1]));
        assert_eq!(rows(&r.actions), want(&[0, 2]));
        let (p, r) = training_step_targets(&ep, 3, &pc, &ec, &norm).unwrap();
        assert_eq!(rows(&p), want(&[3, 3]));
        assert_eq!(rows(&r.actions), want(&[3, 3]));
        let pc4 = AgpConfig { horizon: 4, execute_k: 1, ..AgpConfig::default() };
        let (p, _) = training_step_targets(&ep, 0, &pc4, &ec, &norm).unwrap();
        assert_eq!(rows(&p), want(&[0, 1, 2, 3]));
    }
}
