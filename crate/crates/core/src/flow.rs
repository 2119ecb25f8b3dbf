//! Linear-path conditional flow matching: training samples, loss, and a
//! fixed-grid Euler sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One training draw on the path `x_t = (1 - t)·x0 + t·x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    /// Velocity target `x1 - x0`.
    pub u: Tensor,
}

impl FlowSample {
    pub fn at(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::shape("flow sample", x0.shape(), x1.shape()));
        }
        let xt: Vec<f64> = x0
            .data()
            .iter()
            .zip(x1.data())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        let u: Vec<f64> = x0.data().iter().zip(x1.data()).map(|(a, b)| b - a).collect();
        Ok(Self {
            xt: Tensor::new(x1.shape(), xt)?,
            u: Tensor::new(x1.shape(), u)?,
            x0,
            x1,
            t,
        })
    }
}

/// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1)`.
pub fn make_flow_sample<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> FlowSample {
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    let t: f64 = rng.gen_range(0.0..1.0);
    FlowSample::at(x0, x1.clone(), t).expect("shapes match by construction")
}

/// Mean squared error between predicted velocity and the sample's target.
pub fn flow_loss(tape: &mut Tape<'_>, v_pred: Var, sample: &FlowSample) -> Result<Var> {
    let pred_shape = tape.shape(v_pred).to_vec();
    if pred_shape != sample.u.shape() {
        return Err(Error::shape("flow_loss", &pred_shape, sample.u.shape()));
    }
    let u = tape.constant(sample.u.clone());
    tape.mse(v_pred, u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 10 }
    }
}

/// Integrates `dx/dt = v(x, t)` from standard-normal noise with `n_steps`
/// Euler steps at `t_k = k / n_steps`.
pub fn euler_sample<R, F>(
    mut denoiser: F,
    shape: &[usize],
    cfg: &SamplerConfig,
    stage: &'static str,
    rng: &mut R,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let x0 = Tensor::randn(shape, 1.0, rng);
    euler_integrate(&mut denoiser, x0, cfg, stage)
}

/// Euler integration from a given starting point.
pub fn euler_integrate<F>(denoiser: &mut F, x0: Tensor, cfg: &SamplerConfig, stage: &'static str) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if cfg.n_steps == 0 {
        return Err(Error::Config("sampler n_steps must be >= 1".into()));
    }
    let dt = 1.0 / cfg.n_steps as f64;
    let mut x = x0;
    for k in 0..cfg.n_steps {
        let t = k as f64 * dt;
        let v = denoiser(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler_sample", x.shape(), v.shape()));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.is_finite() {
            return Err(Error::SamplerDivergence { stage, step: k });
        }
    }
    Ok(x)
}
