//! Parameterized layers shared by the backbone, the reasoners and the head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

/// Fan-in scaled normal initialization; `gain == 0` gives zeros.
fn init_weight<R: Rng + ?Sized>(d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Tensor {
    if gain == 0.0 {
        Tensor::zeros(&[d_in, d_out])
    } else {
        Tensor::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init_weight(d_in, d_out, gain, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), group, Tensor::zeros(&[1, d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[1, d], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron with SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    /// `zero_out` zero-initializes the output layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: (usize, usize, usize),
        zero_out: bool,
        rng: &mut R,
    ) -> Self {
        let (d_in, d_hidden, d_out) = dims;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, d_in, d_hidden, true, 1.0, rng),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                group,
                d_hidden,
                d_out,
                true,
                if zero_out { 0.0 } else { 1.0 },
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, h)
    }
}

/// Scaled dot-product attention over `n_heads` column blocks of already
/// projected queries, keys and values.
pub fn multi_head_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let d = tape.value(q).cols();
    let dv = tape.value(v).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) || !dv.is_multiple_of(n_heads) || tape.value(k).cols() != d {
        return Err(Error::shape("multi_head_attention", tape.shape(q), tape.shape(v)));
    }
    if n_heads == 1 {
        return tape.attention(q, k, v);
    }
    let (dh, dvh) = (d / n_heads, dv / n_heads);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dvh, dvh)?;
        heads.push(tape.attention(qh, kh, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Multi-head attention with bias-free query/key/value/output projections.
/// Used as self-attention (`context == x`) or cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl Attention {
    /// `d_model` query width, `d_ctx` context width, `d_attn` inner width.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_model: usize,
        d_ctx: usize,
        d_attn: usize,
        n_heads: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), group, d_model, d_attn, false, 1.0, rng),
            wk: Linear::new(store, &format!("{name}.wk"), group, d_ctx, d_attn, false, 1.0, rng),
            wv: Linear::new(store, &format!("{name}.wv"), group, d_ctx, d_attn, false, 1.0, rng),
            wo: Linear::new(store, &format!("{name}.wo"), group, d_attn, d_model, false, out_gain, rng),
            n_heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, context: Var) -> Result<Var> {
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, context)?;
        let v = self.wv.forward(tape, context)?;
        let o = multi_head_attention(tape, q, k, v, self.n_heads)?;
        self.wo.forward(tape, o)
    }
}

/// Cross-attention into an externally supplied key/value pair (a backbone
/// cache layer). Only the query and output sides are parameterized.
#[derive(Clone, Debug)]
pub struct CacheAttention {
    pub wq: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl CacheAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_model: usize,
        d_cache: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), group, d_model, d_cache, false, 1.0, rng),
            wo: Linear::new(store, &format!("{name}.wo"), group, d_cache, d_model, false, 1.0, rng),
            n_heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.wq.forward(tape, x)?;
        let o = multi_head_attention(tape, q, k, v, self.n_heads)?;
        self.wo.forward(tape, o)
    }
}

/// Transformer layer whose self- and cache cross-attention branches are
/// summed and passed through a residual FFN:
///
/// ```text
/// h̃ = SelfAttn(LN(h)) + CrossAttn(LN(h), K, V)
/// h' = h + FFN(LN(h̃))
/// ```
#[derive(Clone, Debug)]
pub struct ParallelCacheBlock {
    pub ln_in: LayerNorm,
    pub self_attn: Attention,
    pub cross_attn: CacheAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
}

/// Intermediate values of one [`ParallelCacheBlock`] application.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub cross: Var,
    pub ffn: Var,
    pub out: Var,
}

impl ParallelCacheBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        d_model: usize,
        d_cache: usize,
        n_heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_in: LayerNorm::new(store, &format!("{name}.ln_in"), group, d_model),
            self_attn: Attention::new(
                store,
                &format!("{name}.self_attn"),
                group,
                d_model,
                d_model,
                d_model,
                n_heads,
                1.0,
                rng,
            ),
            cross_attn: CacheAttention::new(store, &format!("{name}.cross_attn"), group, d_model, d_cache, n_heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), group, d_model),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                group,
                (d_model, d_model * ffn_mult, d_model),
                false,
                rng,
            ),
        }
    }

    pub fn forward_traced(&self, tape: &mut Tape<'_>, h: Var, k: Var, v: Var) -> Result<BlockTrace> {
        let a = self.ln_in.forward(tape, h)?;
        let sa = self.self_attn.forward(tape, a, a)?;
        let cross = self.cross_attn.forward(tape, a, k, v)?;
        let mixed = tape.add(sa, cross)?;
        let f = self.ln_ffn.forward(tape, mixed)?;
        let ffn = self.ffn.forward(tape, f)?;
        let out = tape.add(h, ffn)?;
        Ok(BlockTrace { cross, ffn, out })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, h, k, v)?.out)
    }
}

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]` as a `1 × dim` row.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let ts = t * 1000.0;
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (ts * freq).sin();
        out[half + j] = (ts * freq).cos();
    }
    Tensor::row(&out)
}

/// Adds the first `rows` rows of a learned position table to `x`.
pub fn add_positions(tape: &mut Tape<'_>, x: Var, table: ParamId) -> Result<Var> {
    let rows = tape.value(x).rows();
    let p = tape.param(table);
    let p = tape.slice_rows(p, 0, rows)?;
    tape.add(x, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multi_head_with_one_head_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::detached();
        let q = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let a = multi_head_attention(&mut tape, q, k, v, 1).unwrap();
        let b = tape.attention(q, k, v).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(multi_head_attention(&mut tape, q, k, v, 3).is_err());
    }

    #[test]
    fn sinusoid_is_bounded_and_time_dependent() {
        let a = sinusoidal_embedding(0.1, 8);
        let b = sinusoidal_embedding(0.2, 8);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert_eq!(sinusoidal_embedding(0.0, 4).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_ffn_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let blk = ParallelCacheBlock::new(&mut store, "b", Group::Ear, 8, 8, 2, 2, &mut rng);
        store.set(blk.ffn.fc2.w, Tensor::zeros(&[16, 8])).unwrap();
        let mut tape = Tape::no_grad(&store);
        let h = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let out = blk.forward(&mut tape, h, k, v).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }
}
