//! Implicit action reasoner: per-layer learnable queries read the backbone
//! cache and an MLP maps the pooled result to one guidance row per layer.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{KvCacheStack, KvCacheVars};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::tensor::{Group, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IarStrategy {
    /// Queries, keys and values projected to `d_reduced` before attention.
    Downsample,
    /// Learnable queries attend to the raw cache.
    Query,
    /// A single query formed by averaging the cache keys.
    AttentionPooling,
}

impl IarStrategy {
    pub const ALL: [IarStrategy; 3] = [IarStrategy::Query, IarStrategy::AttentionPooling, IarStrategy::Downsample];

    pub fn name(self) -> &'static str {
        match self {
            IarStrategy::Downsample => "downsample",
            IarStrategy::Query => "query",
            IarStrategy::AttentionPooling => "attention_pooling",
        }
    }

    /// Display name for results tables.
    pub fn label(self) -> &'static str {
        match self {
            IarStrategy::Downsample => "Downsample",
            IarStrategy::Query => "Query",
            IarStrategy::AttentionPooling => "Attention Pooling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown iar strategy '{s}'")))
    }
}

impl fmt::Display for IarStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IarConfig {
    pub m_rows: usize,
    pub d_reduced: usize,
    pub strategy: IarStrategy,
}

impl Default for IarConfig {
    fn default() -> Self {
        Self {
            m_rows: 1,
            d_reduced: 8,
            strategy: IarStrategy::Downsample,
        }
    }
}

impl IarConfig {
    pub fn validate(&self, backbone_d: usize) -> Result<()> {
        if self.m_rows == 0 {
            return Err(Error::Config("iar.m_rows must be >= 1".into()));
        }
        if self.strategy == IarStrategy::Downsample && (self.d_reduced == 0 || self.d_reduced >= backbone_d) {
            return Err(Error::Config(format!(
                "iar.d_reduced {} must be in 1..{backbone_d}",
                self.d_reduced
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitGuidance {
    /// One row per backbone layer, `n_layers × d_g`.
    pub z_im: Tensor,
}

#[derive(Clone, Debug)]
struct Downsample {
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

#[derive(Clone, Debug)]
pub struct IarLayer {
    query: Option<ParamId>,
    down: Option<Downsample>,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Iar {
    pub cfg: IarConfig,
    pub d_g: usize,
    pub layers: Vec<IarLayer>,
}

impl Iar {
    pub fn new<R: Rng + ?Sized>(
        cfg: &IarConfig,
        backbone_layers: usize,
        backbone_d: usize,
        d_g: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(backbone_d)?;
        let g = Group::Iar;
        let d = backbone_d;
        let layers = (0..backbone_layers)
            .map(|i| {
                let name = format!("iar.layer{i}");
                let query = (cfg.strategy != IarStrategy::AttentionPooling)
                    .then(|| store.add(format!("{name}.query"), g, Tensor::randn(&[cfg.m_rows, d], 1.0, rng)));
                let down = (cfg.strategy == IarStrategy::Downsample).then(|| Downsample {
                    wq: Linear::new(store, &format!("{name}.wq"), g, d, cfg.d_reduced, false, 1.0, rng),
                    wk: Linear::new(store, &format!("{name}.wk"), g, d, cfg.d_reduced, false, 1.0, rng),
                    wv: Linear::new(store, &format!("{name}.wv"), g, d, cfg.d_reduced, false, 1.0, rng),
                });
                let width = if down.is_some() { cfg.d_reduced } else { d };
                let mlp = Mlp::new(store, &format!("{name}.mlp"), g, (width, d_g, d_g), true, rng);
                IarLayer { query, down, mlp }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), d_g, layers })
    }

    /// Guidance row `1 × d_g` for cache layer `i`.
    pub fn layer_forward(&self, tape: &mut Tape<'_>, i: usize, k: Var, v: Var) -> Result<Var> {
        let layer = self
            .layers
            .get(i)
            .ok_or_else(|| Error::Config(format!("no reasoner parameters for cache layer {i}")))?;
        let attended = match (&layer.down, layer.query) {
            (Some(down), Some(q)) => {
                let q = tape.param(q);
                let q = down.wq.forward(tape, q)?;
                let k = down.wk.forward(tape, k)?;
                let v = down.wv.forward(tape, v)?;
                tape.attention(q, k, v)?
            }
            (None, Some(q)) => {
                let q = tape.param(q);
                tape.attention(q, k, v)?
            }
            (None, None) => {
                let q = tape.mean_rows(k);
                tape.attention(q, k, v)?
            }
            (Some(_), None) => unreachable!("downsampling always has queries"),
        };
        let pooled = tape.mean_rows(attended);
        layer.mlp.forward(tape, pooled)
    }

    /// Stacks one guidance row per cache layer into `n_layers × d_g`.
    pub fn forward(&self, tape: &mut Tape<'_>, cache: &KvCacheVars) -> Result<Var> {
        if cache.n_layers() != self.layers.len() {
            return Err(Error::Config(format!(
                "cache has {} layers but the implicit reasoner has {}",
                cache.n_layers(),
                self.layers.len()
            )));
        }
        let rows = cache
            .layers
            .iter()
            .enumerate()
            .map(|(i, &(k, v))| self.layer_forward(tape, i, k, v))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    pub fn extract(&self, store: &ParamStore, cache: &KvCacheStack) -> Result<ImplicitGuidance> {
        let mut tape = Tape::no_grad(store);
        let c = cache.bind(&mut tape);
        let z = self.forward(&mut tape, &c)?;
        Ok(ImplicitGuidance { z_im: tape.value(z).clone() })
    }

    /// Output-layer weights of every per-layer MLP.
    pub fn output_weights(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.mlp.fc2.w).collect()
    }

    /// Value projection of layer `i` (downsample strategy only).
    pub fn value_projection(&self, i: usize) -> Option<ParamId> {
        self.layers.get(i)?.down.as_ref().map(|d| d.wv.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_cache(n: usize, s: usize, d: usize, rng: &mut ChaCha8Rng) -> KvCacheStack {
        KvCacheStack {
            layers: (0..n)
                .map(|_| (Arc::new(Tensor::randn(&[s, d], 1.0, rng)), Arc::new(Tensor::randn(&[s, d], 1.0, rng))))
                .collect(),
        }
    }

    /// Builds a reasoner and gives its output layers nonzero weights.
    fn live_iar(strategy: IarStrategy, n: usize, d: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Iar {
        let cfg = IarConfig { m_rows: 2, d_reduced: 3, strategy };
        let iar = Iar::new(&cfg, n, d, 5, store, rng).unwrap();
        for w in iar.output_weights() {
            let shape = store.get(w).shape().to_vec();
            store.set(w, Tensor::randn(&shape, 1.0, rng)).unwrap();
        }
        iar
    }

    #[test]
    fn reduced_width_must_be_smaller() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = IarConfig { d_reduced: 8, ..IarConfig::default() };
        assert!(matches!(Iar::new(&cfg, 2, 8, 4, &mut store, &mut rng), Err(Error::Config(_))));
        let q = IarConfig { d_reduced: 8, strategy: IarStrategy::Query, ..IarConfig::default() };
        assert!(Iar::new(&q, 2, 8, 4, &mut store, &mut rng).is_ok());
    }

    #[test]
    fn strategies_share_output_shape_and_start_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = random_cache(4, 5, 8, &mut rng);
        for s in IarStrategy::ALL {
            let mut store = ParamStore::new();
            let iar = Iar::new(&IarConfig { strategy: s, d_reduced: 4, m_rows: 1 }, 4, 8, 6, &mut store, &mut rng).unwrap();
            let z = iar.extract(&store, &cache).unwrap();
            assert_eq!(z.z_im.shape(), &[4, 6], "{s}");
            assert!(z.z_im.data().iter().all(|v| *v == 0.0));
            assert_eq!(IarStrategy::parse(s.name()).unwrap(), s);
        }
    }

    #[test]
    fn zeroing_one_value_projection_changes_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let iar = live_iar(IarStrategy::Downsample, 4, 8, &mut store, &mut rng);
        let cache = random_cache(4, 5, 8, &mut rng);
        let base = iar.extract(&store, &cache).unwrap().z_im;
        for j in 0..4 {
            let mut s = store.clone();
            let wv = iar.value_projection(j).unwrap();
            s.set(wv, Tensor::zeros(&[8, 3])).unwrap();
            let z = iar.extract(&s, &cache).unwrap().z_im;
            for i in 0..4 {
                assert_eq!(z.row_slice(i) != base.row_slice(i), i == j, "ablate {j}, row {i}");
            }
        }
    }

    #[test]
    fn identical_keys_make_queries_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let iar = live_iar(IarStrategy::Query, 1, 4, &mut store, &mut rng);
        let k = Tensor::from_rows(&[[0.3, -0.2, 1.0, 0.5]; 3]).unwrap();
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let cache = KvCacheStack { layers: vec![(Arc::new(k), Arc::new(v.clone()))] };
        let a = iar.extract(&store, &cache).unwrap().z_im;
        let q = iar.layers[0].query.unwrap();
        store.set(q, Tensor::randn(&[2, 4], 3.0, &mut rng)).unwrap();
        let b = iar.extract(&store, &cache).unwrap().z_im;
        assert!(a.max_abs_diff(&b) < 1e-12);

        // the attended row is the mean of the values
        let mut tape = Tape::no_grad(&store);
        let c = cache.bind(&mut tape);
        let qv = tape.param(q);
        let att = tape.attention(qv, c.layers[0].0, c.layers[0].1).unwrap();
        let mean: Vec<f64> = (0..4).map(|j| (0..3).map(|i| v.get(i, j)).sum::<f64>() / 3.0).collect();
        for r in 0..2 {
            for (j, m) in mean.iter().enumerate() {
                assert!((tape.value(att).get(r, j) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_permutation_leaves_guidance_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let perm = [3, 0, 4, 1, 2];
        for s in IarStrategy::ALL {
            let mut store = ParamStore::new();
            let iar = live_iar(s, 3, 8, &mut store, &mut rng);
            let cache = random_cache(3, 5, 8, &mut rng);
            let shuffle = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let permuted = KvCacheStack {
                layers: cache.layers.iter().map(|(k, v)| (Arc::new(shuffle(k)), Arc::new(shuffle(v)))).collect(),
            };
            let a = iar.extract(&store, &cache).unwrap().z_im;
            let b = iar.extract(&store, &permuted).unwrap().z_im;
            assert!(a.max_abs_diff(&b) < 1e-10, "{s}: {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn downsample_matches_step_by_step_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = IarConfig { m_rows: 1, d_reduced: 2, strategy: IarStrategy::Downsample };
        let iar = Iar::new(&cfg, 1, 4, 3, &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.8, &mut rng)).unwrap();
        }
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let cache = KvCacheStack { layers: vec![(Arc::new(k.clone()), Arc::new(v.clone()))] };
        let got = iar.extract(&store, &cache).unwrap().z_im;

        let p = |n: &str| store.get(store.find(n).unwrap()).clone();
        let mm = |a: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            (0..a.rows())
                .map(|i| (0..b.cols()).map(|j| (0..a.cols()).map(|l| a.get(i, l) * b.get(l, j)).sum()).collect())
                .collect()
        };
        let q = p("iar.layer0.query");
        let qp = mm(&q, &p("iar.layer0.wq.w"));
        let kp = mm(&k, &p("iar.layer0.wk.w"));
        let vp = mm(&v, &p("iar.layer0.wv.w"));
        let scores: Vec<f64> = kp.iter().map(|kr| (qp[0][0] * kr[0] + qp[0][1] * kr[1]) / 2f64.sqrt()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let att: Vec<f64> = (0..2).map(|j| (0..3).map(|i| scores[i].exp() / z * vp[i][j]).sum()).collect();
        let (w1, b1, w2, b2) = (p("iar.layer0.mlp.fc1.w"), p("iar.layer0.mlp.fc1.b"), p("iar.layer0.mlp.fc2.w"), p("iar.layer0.mlp.fc2.b"));
        let h: Vec<f64> = (0..3)
            .map(|j| {
                let x = att[0] * w1.get(0, j) + att[1] * w1.get(1, j) + b1.get(0, j);
                x / (1.0 + (-x).exp())
            })
            .collect();
        for j in 0..3 {
            let want = (0..3).map(|l| h[l] * w2.get(l, j)).sum::<f64>() + b2.get(0, j);
            assert!((got.get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_count_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let iar = live_iar(IarStrategy::Query, 2, 8, &mut store, &mut rng);
        let cache = random_cache(3, 4, 8, &mut rng);
        assert!(matches!(iar.extract(&store, &cache), Err(Error::Config(_))));
    }
}
