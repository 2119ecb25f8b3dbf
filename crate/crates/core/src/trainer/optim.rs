//! AdamW, global-norm clipping and the EMA shadow.

use crate::tensor::{GroupSet, ParamStore};

/// Euclidean norm over every gradient slot that is present.
pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-weight-decay Adam with per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, p: &AdamWParams) {
        self.t += 1;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + p.eps) + p.weight_decay * w[i]);
            }
        }
    }
}

/// `ema ← ρ·ema + (1 − ρ)·θ` for parameters in `groups`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64, groups: GroupSet) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !groups.contains(params.group(id)) {
            continue;
        }
        let src = params.get(id).data();
        for (e, &x) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            *e = decay * *e + (1.0 - decay) * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Group, Tensor};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(vals in proptest::collection::vec(-100.0f64..100.0, 1..40), max in 0.01f64..10.0) {
            let mut g = vec![Some(vals.clone()), None, Some(vals.iter().map(|v| v * 0.5).collect())];
            clip_global_norm(&mut g, max);
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }

        #[test]
        fn small_gradients_are_untouched(vals in proptest::collection::vec(-0.1f64..0.1, 1..10)) {
            let mut g = vec![Some(vals.clone())];
            clip_global_norm(&mut g, 10.0);
            prop_assert_eq!(g[0].as_ref().unwrap(), &vals);
        }
    }

    #[test]
    fn ema_recurrence_is_exact() {
        let mut params = ParamStore::new();
        let id = params.add("w", Group::Agp, Tensor::row(&[1.0, -2.0]));
        let mut ema = params.clone();
        params.set(id, Tensor::row(&[3.0, 5.0])).unwrap();
        ema_update(&mut ema, &params, 0.999, GroupSet::ALL);
        assert_eq!(ema.get(id).data(), &[0.999 * 1.0 + (1.0 - 0.999) * 3.0, 0.999 * -2.0 + (1.0 - 0.999) * 5.0]);
        let before = ema.get(id).clone();
        ema_update(&mut ema, &params, 0.999, GroupSet::NONE.with(Group::Ear));
        assert_eq!(ema.get(id), &before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Group::Agp, Tensor::row(&[1.0, 1.0]));
        let mut opt = AdamW::new(&store);
        let p = AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: 0.0 };
        opt.step(&mut store, &[Some(vec![0.5, -3.0])], 0.1, &p);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] - 1.1).abs() < 1e-9);
        // parameters without gradients are skipped
        let mut s2 = store.clone();
        opt.step(&mut s2, &[None], 0.1, &p);
        assert_eq!(s2.get(id), store.get(id));
    }
}
