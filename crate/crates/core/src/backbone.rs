//! Observation/instruction tokenizer and the small bidirectional encoder that
//! exports one key/value pair per layer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::perturb::PARAPHRASE_WORDS;
use crate::env::{Color, EnvState, ShapeKind, ZoneName};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

pub const X_BINS: usize = 32;
pub const Y_BINS: usize = 32;
pub const HUE_BINS: usize = 16;
const X_BASE: u32 = 0;
const Y_BASE: u32 = X_BASE + X_BINS as u32;
const GRIP_BASE: u32 = Y_BASE + Y_BINS as u32;
const HUE_BASE: u32 = GRIP_BASE + 2;
const SHAPE_BASE: u32 = HUE_BASE + HUE_BINS as u32;
/// Bins for object offsets from the agent, spanning `±REL_RANGE`.
pub const REL_BINS: usize = 48;
pub const REL_RANGE: f64 = 0.75;
const REL_X_BASE: u32 = SHAPE_BASE + 4;
const REL_Y_BASE: u32 = REL_X_BASE + REL_BINS as u32;
const WORD_BASE: u32 = REL_Y_BASE + REL_BINS as u32;

const BASE_WORDS: [&str; 6] = ["pick", "push", "place", "the", "to", "in"];

fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = BASE_WORDS.to_vec();
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    words.extend(ZoneName::ALL.iter().map(|z| z.word()));
    words.extend(PARAPHRASE_WORDS);
    words
}

/// Smallest vocabulary that covers every token the tokenizer emits.
pub fn min_vocab_size() -> usize {
    WORD_BASE as usize + vocabulary().len()
}

fn quantize(v: f64, bins: usize) -> u32 {
    ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1) as u32
}

/// Token sequence for one policy query.
///
/// Each observed entity occupies one sequence position whose embedding is
/// the sum of its factored token embeddings; each instruction word occupies
/// its own position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalInput {
    /// Agent slot first, then one slot per object.
    pub obs_slots: Vec<Vec<u32>>,
    pub instr_tokens: Vec<u32>,
}

impl MultimodalInput {
    /// Every token id, slot members flattened in order.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.obs_slots.iter().flatten().copied().collect();
        t.extend_from_slice(&self.instr_tokens);
        t
    }

    /// Sequence length: one position per slot and per word.
    pub fn len(&self) -> usize {
        self.obs_slots.len() + self.instr_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Maps instruction words onto the fixed vocabulary.
pub fn tokenize_instruction(instruction: &str) -> Result<Vec<u32>> {
    let vocab = vocabulary();
    let mut out = Vec::new();
    let mut oov = Vec::new();
    for w in instruction.split_whitespace() {
        match vocab.iter().position(|v| *v == w) {
            Some(i) => out.push(WORD_BASE + i as u32),
            None => oov.push(w.to_string()),
        }
    }
    if !oov.is_empty() {
        return Err(Error::OutOfVocabulary(oov));
    }
    Ok(out)
}

fn quantize_offset(v: f64) -> u32 {
    quantize((v + REL_RANGE) / (2.0 * REL_RANGE), REL_BINS)
}

/// Quantized state slots: the agent (x, y, gripper), then per object its
/// hue, shape and offset from the agent along x and y.
pub fn tokenize_observation(state: &EnvState) -> Vec<Vec<u32>> {
    let mut slots = vec![vec![
        X_BASE + quantize(state.agent_pos[0], X_BINS),
        Y_BASE + quantize(state.agent_pos[1], Y_BINS),
        GRIP_BASE + u32::from(state.gripper > 0.5),
    ]];
    slots.extend(state.objects.iter().map(|o| {
        vec![
            HUE_BASE + quantize(o.color.hue() * state.brightness, HUE_BINS),
            SHAPE_BASE + o.shape.index() as u32,
            REL_X_BASE + quantize_offset(o.pos[0] - state.agent_pos[0]),
            REL_Y_BASE + quantize_offset(o.pos[1] - state.agent_pos[1]),
        ]
    }));
    slots
}

pub fn tokenize(observation: &EnvState, instruction: &str) -> Result<MultimodalInput> {
    Ok(MultimodalInput {
        obs_slots: tokenize_observation(observation),
        instr_tokens: tokenize_instruction(instruction)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_mult: usize,
    /// Exclude backbone weights from optimization.
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 48,
            ffn_mult: 2,
            frozen: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("backbone.n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "backbone.d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < min_vocab_size() {
            return Err(Error::Config(format!(
                "backbone.vocab_size {} below required {}",
                self.vocab_size,
                min_vocab_size()
            )));
        }
        Ok(())
    }
}

/// Per-layer key/value matrices as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheStack {
    pub layers: Vec<(Arc<Tensor>, Arc<Tensor>)>,
}

impl KvCacheStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map(|(k, _)| k.rows()).unwrap_or(0)
    }

    /// Binds the cache as constants on `tape`.
    pub fn bind(&self, tape: &mut Tape<'_>) -> KvCacheVars {
        KvCacheVars {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (tape.shared_constant(Arc::clone(k)), tape.shared_constant(Arc::clone(v))))
                .collect(),
        }
    }
}

/// Per-layer key/value matrices recorded on a tape.
#[derive(Clone, Debug)]
pub struct KvCacheVars {
    pub layers: Vec<(Var, Var)>,
}

impl KvCacheVars {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn values(&self, tape: &Tape<'_>) -> KvCacheStack {
        KvCacheStack {
            layers: self
                .layers
                .iter()
                .map(|&(k, v)| (tape.shared_value(k), tape.shared_value(v)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    wq: Option<Linear>,
    wk: Linear,
    wv: Linear,
    wo: Option<Linear>,
    ln_ffn: Option<LayerNorm>,
    ffn: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
}

/// Token-embedding initialization: quantized-coordinate tokens start from a
/// smooth code of their bin center so neighbouring bins begin close. The x
/// and y codes live in disjoint halves of the width, as they share a slot.
fn init_token_table<R: Rng + ?Sized>(vocab: usize, d: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(&[vocab, d], 0.5, rng);
    let smooth = |base: u32, bins: usize, dims: std::ops::Range<usize>, t: &mut Tensor| {
        for b in 0..bins {
            let v = (b as f64 + 0.5) / bins as f64;
            let row = (base as usize + b) * d;
            for j in 0..d {
                let x = &mut t.data_mut()[row + j];
                *x *= 0.5;
                if dims.contains(&j) {
                    let local = j - dims.start;
                    let a = std::f64::consts::PI * v * (local / 2 + 1) as f64;
                    *x += if local.is_multiple_of(2) { a.cos() } else { a.sin() };
                }
            }
        }
    };
    let half = d / 2;
    smooth(X_BASE, X_BINS, 0..half, &mut t);
    smooth(Y_BASE, Y_BINS, half..d, &mut t);
    smooth(HUE_BASE, HUE_BINS, 0..d, &mut t);
    smooth(REL_X_BASE, REL_BINS, 0..half, &mut t);
    smooth(REL_Y_BASE, REL_BINS, half..d, &mut t);
    t
}

/// Position table seeded with a geometric-frequency sinusoid plus small noise.
fn init_position_table<R: Rng + ?Sized>(max_seq: usize, d: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(&[max_seq, d], 0.05, rng);
    for p in 0..max_seq {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            t.data_mut()[p * d + j] += 0.5 * if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = Group::Backbone;
        let d = cfg.d_model;
        let tok_emb = store.add("backbone.tok_emb", g, init_token_table(cfg.vocab_size, d, rng));
        let pos_emb = store.add("backbone.pos_emb", g, init_position_table(cfg.max_seq, d, rng));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let name = format!("backbone.layer{i}");
            let last = i + 1 == cfg.n_layers;
            // the final layer only contributes its cache; its residual stream is never read
            layers.push(EncoderLayer {
                ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), g, d),
                wq: (!last).then(|| Linear::new(store, &format!("{name}.wq"), g, d, d, false, 1.0, rng)),
                wk: Linear::new(store, &format!("{name}.wk"), g, d, d, false, 1.0, rng),
                wv: Linear::new(store, &format!("{name}.wv"), g, d, d, false, 1.0, rng),
                wo: (!last).then(|| Linear::new(store, &format!("{name}.wo"), g, d, d, false, 1.0, rng)),
                ln_ffn: (!last).then(|| LayerNorm::new(store, &format!("{name}.ln_ffn"), g, d)),
                ffn: (!last).then(|| Mlp::new(store, &format!("{name}.ffn"), g, (d, d * cfg.ffn_mult, d), false, rng)),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
        })
    }

    /// Embedded input `h_0` (token plus position embeddings).
    pub fn embed(&self, tape: &mut Tape<'_>, input: &MultimodalInput) -> Result<Var> {
        let tokens = input.tokens();
        let len = input.len();
        if len == 0 || input.obs_slots.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty multimodal input or observation slot".into()));
        }
        if len > self.cfg.max_seq {
            return Err(Error::Capacity { len, max: self.cfg.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Data(format!("token {bad} outside vocabulary {}", self.cfg.vocab_size)));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.tok_emb);
        let rows = tape.gather_rows(table, &idx)?;
        // sum each slot's member rows into one position
        let mut pool = vec![0.0; len * idx.len()];
        let sizes = input.obs_slots.iter().map(Vec::len).chain(std::iter::repeat_n(1, input.instr_tokens.len()));
        let mut col = 0;
        for (r, n) in sizes.enumerate() {
            for c in col..col + n {
                pool[r * idx.len() + c] = 1.0;
            }
            col += n;
        }
        let pool = tape.constant(Tensor::new(&[len, idx.len()], pool)?);
        let e = tape.matmul(pool, rows)?;
        let p = tape.param(self.pos_emb);
        let p = tape.slice_rows(p, 0, len)?;
        tape.add(e, p)
    }

    /// Runs the encoder and returns each layer's keys and values.
    pub fn encode(&self, tape: &mut Tape<'_>, input: &MultimodalInput) -> Result<KvCacheVars> {
        let mut h = self.embed(tape, input)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.ln_attn.forward(tape, h)?;
            let k = layer.wk.forward(tape, a)?;
            let v = layer.wv.forward(tape, a)?;
            out.push((k, v));
            if let (Some(wq), Some(wo), Some(ln_ffn), Some(ffn)) = (&layer.wq, &layer.wo, &layer.ln_ffn, &layer.ffn) {
                let q = wq.forward(tape, a)?;
                let o = multi_head_attention(tape, q, k, v, self.cfg.n_heads)?;
                let o = wo.forward(tape, o)?;
                h = tape.add(h, o)?;
                let f = ln_ffn.forward(tape, h)?;
                let f = ffn.forward(tape, f)?;
                h = tape.add(h, f)?;
            }
        }
        Ok(KvCacheVars { layers: out })
    }

    /// Gradient-free encoding.
    pub fn encode_values(&self, store: &ParamStore, input: &MultimodalInput) -> Result<KvCacheStack> {
        let mut tape = Tape::no_grad(store);
        let vars = self.encode(&mut tape, input)?;
        Ok(vars.values(&tape))
    }

    /// Layer-1 key projection weights and norm, for independent recomputation.
    pub fn first_layer_key_params(&self) -> (ParamId, ParamId, ParamId) {
        let l = &self.layers[0];
        (l.ln_attn.gamma, l.ln_attn.beta, l.wk.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{default_zones, Object};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> EnvState {
        EnvState {
            agent_pos: [0.5, 0.1],
            gripper: 0.0,
            objects: vec![
                Object { color: Color::Red, shape: ShapeKind::Cube, pos: [0.4, 0.5] },
                Object { color: Color::Blue, shape: ShapeKind::Ring, pos: [0.6, 0.6] },
            ],
            held: None,
            zones: default_zones(),
            brightness: 1.0,
        }
    }

    #[test]
    fn empty_instruction_gives_observation_tokens_only() {
        let a = tokenize(&state(), "").unwrap();
        assert!(a.instr_tokens.is_empty());
        assert_eq!(a.obs_slots.len(), 1 + 2);
        assert_eq!(a.len(), 3);
        assert_eq!(a.tokens().len(), 3 + 4 * 2);
        assert_eq!(a, tokenize(&state(), "").unwrap());
    }

    #[test]
    fn one_bin_move_changes_exactly_one_token() {
        let a = tokenize(&state(), "pick the red cube").unwrap();
        let mut s = state();
        s.objects[1].pos[0] += 2.0 / X_BINS as f64;
        let b = tokenize(&s, "pick the red cube").unwrap();
        let diff = a.tokens().iter().zip(b.tokens()).filter(|(x, y)| **x != *y).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn out_of_vocabulary_words_are_listed() {
        match tokenize(&state(), "pick the purple cube") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, vec!["purple".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_shapes_and_capacity() {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig::default();
        let bb = Backbone::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let input = tokenize(&state(), "pick the red cube").unwrap();
        let cache = bb.encode_values(&store, &input).unwrap();
        assert_eq!(cache.n_layers(), cfg.n_layers);
        for (k, v) in &cache.layers {
            assert_eq!(k.shape(), &[input.len(), cfg.d_model]);
            assert_eq!(v.shape(), &[input.len(), cfg.d_model]);
        }
        let single = MultimodalInput { obs_slots: vec![vec![3, 40]], instr_tokens: vec![] };
        let c1 = bb.encode_values(&store, &single).unwrap();
        assert!(c1.layers.iter().all(|(k, v)| k.rows() == 1 && v.rows() == 1));

        let long = MultimodalInput { obs_slots: vec![vec![1]; cfg.max_seq + 1], instr_tokens: vec![] };
        assert!(matches!(bb.encode_values(&store, &long), Err(Error::Capacity { .. })));
        let hollow = MultimodalInput { obs_slots: vec![vec![]], instr_tokens: vec![200] };
        assert!(matches!(bb.encode_values(&store, &hollow), Err(Error::Data(_))));
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig { d_model: 30, n_heads: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { n_layers: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
