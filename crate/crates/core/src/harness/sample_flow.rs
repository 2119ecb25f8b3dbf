//! Unconditional flow sampling on a synthetic two-mode mixture, and
//! per-mode summaries of any sample set.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agp::{AgpConfig, AgpHead};
use crate::backbone::KvCacheStack;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, flow_loss, make_flow_sample, SamplerConfig};
use crate::harness::config::SampleFlowConfig;
use crate::tensor::{GroupSet, ParamStore, Tape, Tensor};
use crate::trainer::{clip_global_norm, AdamW, AdamWParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub center: Vec<f64>,
    pub weight: f64,
    pub count: usize,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub source: String,
    pub n_samples: usize,
    pub n_steps: usize,
    pub mean: Vec<f64>,
    pub modes: Vec<ModeSummary>,
    /// Final training loss (synthetic source only).
    pub final_loss: Option<f64>,
}

/// Two-means clustering seeded at the samples with the smallest and largest
/// coordinate sum, refined by Lloyd iterations until assignments settle.
pub fn two_means(samples: &[Vec<f64>]) -> Result<Vec<ModeSummary>> {
    if samples.len() < 2 {
        return Err(Error::Data("need at least two samples to summarize".into()));
    }
    let dim = samples[0].len();
    let sum = |v: &Vec<f64>| v.iter().sum::<f64>();
    let lo = samples.iter().min_by(|a, b| sum(a).total_cmp(&sum(b))).expect("non-empty");
    let hi = samples.iter().max_by(|a, b| sum(a).total_cmp(&sum(b))).expect("non-empty");
    let mut centers = [lo.clone(), hi.clone()];
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..100 {
        let next: Vec<usize> = samples
            .iter()
            .map(|s| usize::from(d2(s, &centers[1]) < d2(s, &centers[0])))
            .collect();
        let settled = next == assign;
        assign = next;
        for (k, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = samples.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(s, _)| s).collect();
            if !members.is_empty() {
                *c = (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        if settled {
            break;
        }
    }
    let n = samples.len() as f64;
    Ok((0..2)
        .map(|k| {
            let members: Vec<&Vec<f64>> = samples.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(s, _)| s).collect();
            let c = &centers[k];
            let m = members.len().max(1) as f64;
            let covariance = (0..dim)
                .map(|i| (0..dim).map(|j| members.iter().map(|s| (s[i] - c[i]) * (s[j] - c[j])).sum::<f64>() / m).collect())
                .collect();
            ModeSummary { center: c.clone(), weight: members.len() as f64 / n, count: members.len(), covariance }
        })
        .collect())
}

pub fn summarize(source: &str, samples: &[Vec<f64>], n_steps: usize, final_loss: Option<f64>) -> Result<FlowSummary> {
    let dim = samples.first().map(Vec::len).unwrap_or(0);
    let n = samples.len().max(1) as f64;
    Ok(FlowSummary {
        source: source.to_string(),
        n_samples: samples.len(),
        n_steps,
        mean: (0..dim).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect(),
        modes: two_means(samples)?,
        final_loss,
    })
}

/// Draws one point from the symmetric two-mode mixture.
pub fn mixture_point<R: Rng + ?Sized>(cfg: &SampleFlowConfig, dim: usize, rng: &mut R) -> Vec<f64> {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma is finite and non-negative");
    (0..dim).map(|_| sign * cfg.mode_offset + noise.sample(rng)).collect()
}

/// An AGP head without guidance, trained on the mixture with an all-zero
/// one-token cache.
pub struct SyntheticDenoiser {
    pub head: AgpHead,
    pub store: ParamStore,
    pub cache: KvCacheStack,
    pub final_loss: f64,
}

impl SyntheticDenoiser {
    pub fn train(
        agp: &AgpConfig,
        backbone_layers: usize,
        backbone_d: usize,
        cfg: &SampleFlowConfig,
    ) -> Result<Self> {
        if cfg.sigma < 0.0 || !cfg.sigma.is_finite() || cfg.batch_size == 0 {
            return Err(Error::Config("sample_flow.sigma must be >= 0 and batch_size >= 1".into()));
        }
        let head_cfg = AgpConfig { horizon: 1, execute_k: 1, ..agp.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let head = AgpHead::new(&head_cfg, backbone_layers, backbone_d, false, &mut store, &mut rng)?;
        let zero = Arc::new(Tensor::zeros(&[1, backbone_d]));
        let cache = KvCacheStack { layers: vec![(Arc::clone(&zero), Arc::clone(&zero)); backbone_layers] };
        let mut opt = AdamW::new(&store);
        let p = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let dim = head_cfg.action_dim;
        let mut final_loss = f64::NAN;
        for step in 0..cfg.train_steps {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
            let mut loss_sum = 0.0;
            for _ in 0..cfg.batch_size {
                let x1 = Tensor::new(&[1, dim], mixture_point(cfg, dim, &mut rng))?;
                let sample = make_flow_sample(&x1, &mut rng);
                let mut tape = Tape::with_grad_groups(&store, GroupSet::ALL);
                let c = cache.bind(&mut tape);
                let xt = tape.constant(sample.xt.clone());
                let v = head.forward(&mut tape, xt, sample.t, None, &c)?;
                let loss = flow_loss(&mut tape, v, &sample)?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { step, fingerprint: cfg.seed });
                }
                loss_sum += l;
                let g = tape.backward(loss)?.param_grads(&tape);
                for (acc, g) in grads.iter_mut().zip(g) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                            None => *acc = Some(g),
                        }
                    }
                }
            }
            let b = cfg.batch_size as f64;
            grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v /= b));
            clip_global_norm(&mut grads, 1.0);
            // cosine decay to a tenth of the base rate
            let frac = step as f64 / cfg.train_steps.max(1) as f64;
            let lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()));
            opt.step(&mut store, &grads, lr, &p);
            final_loss = loss_sum / b;
        }
        Ok(Self { head, store, cache, final_loss })
    }

    /// `n` Euler samples, one row each.
    pub fn sample(&self, n: usize, sampler: &SamplerConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.head.cfg.action_dim;
        (0..n)
            .map(|_| {
                let x = euler_sample(
                    |x, t| self.head.velocity(&self.store, x, t, None, &self.cache),
                    &[1, dim],
                    sampler,
                    "synthetic",
                    &mut rng,
                )?;
                Ok(x.data().to_vec())
            })
            .collect()
    }
}

pub fn samples_csv(samples: &[Vec<f64>]) -> String {
    let dim = samples.first().map(Vec::len).unwrap_or(0);
    let mut s = (0..dim).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in samples {
        s.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}
