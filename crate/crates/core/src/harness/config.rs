//! Run configuration: one JSON document with a section per module, dotted
//! `key=value` overrides, and a resolved echo written next to every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agp::AgpConfig;
use crate::backbone::BackboneConfig;
use crate::ear::EarConfig;
use crate::env::perturb::PerturbParams;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::iar::IarConfig;
use crate::policy::{ModelConfig, Variant};
use crate::trainer::{TrainConfig, TrainerSpec};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "ACOT_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_per_task: usize,
    /// Clean evaluation scenes per task (one trial each).
    pub eval_per_task: usize,
    /// Scenes per task in each perturbation suite.
    pub suite_per_task: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 1000, train_per_task: 50, eval_per_task: 50, suite_per_task: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Evaluate EMA weights rather than raw ones.
    pub use_ema: bool,
    /// Also run every perturbation suite found next to the clean one.
    pub perturbed: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 7, use_ema: true, perturbed: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Variant for grids that do not vary the module set.
    pub variant: Variant,
    pub perturbed: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], variant: Variant::Full, perturbed: true }
    }
}

/// The synthetic two-mode mixture used by `sample-flow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleFlowConfig {
    pub n_samples: usize,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Modes sit at `±mode_offset` on every axis.
    pub mode_offset: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SampleFlowConfig {
    fn default() -> Self {
        Self { n_samples: 1000, train_steps: 1500, batch_size: 32, lr: 3e-3, mode_offset: 1.0, sigma: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub variant: Variant,
    pub env: EnvConfig,
    pub perturb: PerturbParams,
    pub backbone: BackboneConfig,
    pub ear: EarConfig,
    pub iar: IarConfig,
    pub agp: AgpConfig,
    pub flow: SamplerConfig,
    pub ref_flow: SamplerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub sample_flow: SampleFlowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            name: "acot".into(),
            variant: Variant::Full,
            env: EnvConfig::default(),
            perturb: PerturbParams::default(),
            backbone: m.backbone,
            ear: m.ear,
            iar: m.iar,
            agp: m.agp,
            flow: m.flow,
            ref_flow: m.ref_flow,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            sample_flow: SampleFlowConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            ear: self.ear.clone(),
            iar: self.iar.clone(),
            agp: self.agp.clone(),
            flow: self.flow.clone(),
            ref_flow: self.ref_flow.clone(),
        }
    }

    pub fn trainer_spec(&self) -> TrainerSpec {
        TrainerSpec {
            variant: self.variant,
            model: self.model(),
            delta_max: self.env.delta_max,
            train: self.train.clone(),
        }
    }

    /// Parses a config file (missing sections take defaults) and applies
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json()?)?;
        Ok(())
    }
}

/// Sets `a.b.c=value` inside a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise. Only existing keys can be
/// set.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{assignment}' has an empty key")));
    }
    let mut node = doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Worker threads from the environment; 1 when unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}='{s}' is not a positive integer"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"lambda3": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("lambda3"));
        let e = RunConfig::default().with_overrides(&["train.nope=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_parse_json_and_strings() {
        let c = RunConfig::default()
            .with_overrides(&[
                "train.total_steps=12".into(),
                "variant=iar".into(),
                "iar.strategy=\"query\"".into(),
                "ablate.seeds=[4,5]".into(),
                "name=run one".into(),
            ])
            .unwrap();
        assert_eq!(c.train.total_steps, 12);
        assert_eq!(c.variant, Variant::Iar);
        assert_eq!(c.ablate.seeds, vec![4, 5]);
        assert_eq!(c.name, "run one");
        assert!(RunConfig::default().with_overrides(&["train.total_steps=abc".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["novalue".into()]).is_err());
    }

    #[test]
    fn partial_files_take_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"total_steps": 9}, "variant": "baseline"}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.train.total_steps, 9);
        assert_eq!(c.train.lambda1, 0.5);
        assert_eq!(c.variant, Variant::Baseline);
        assert_eq!(RunConfig::load(Some(&dir.path().join("missing.json")), &[]).unwrap_err().exit_code(), 2);
    }
}
