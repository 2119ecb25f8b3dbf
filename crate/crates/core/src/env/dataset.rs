//! Episode generation and the binary dataset format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "ACOTDATA" | version u32 | header_len u32 | header JSON | count u32
//! count × (record_len u64 | record)
//! ```
//!
//! A record holds the stream index, task, perturbation, instruction, token
//! ids, zones, every state and every expert action. Integers are 32-bit
//! (the stream index is 64-bit), reals are f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::perturb::{perturb, stream_rng, Category, EvalScene, ObservationModel, PerturbParams, PerturbationSuite};
use super::{
    sample_scene, script_expert, Color, EnvConfig, EnvState, Episode, Object, Scene, ShapeKind, TaskTemplate, ToyTask,
    Zone, ZoneName,
};
use crate::backbone::tokenize_instruction;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ACOTDATA";
pub const FORMAT_VERSION: u32 = 1;

/// Largest tolerated fraction of scenes the expert cannot solve.
pub const MAX_UNSOLVABLE_RATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    /// `"train"` or `"eval"`.
    pub kind: String,
    pub suite: Option<Category>,
    pub seed: u64,
    pub env: EnvConfig,
    pub perturb: Option<PerturbParams>,
    pub episodes_per_task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    /// RNG stream the scene was drawn from.
    pub stream: u64,
    pub category: Option<Category>,
    pub observation: ObservationModel,
    pub episode: Episode,
}

impl EpisodeRecord {
    /// The evaluation scene this record was generated for.
    pub fn eval_scene(&self) -> Result<EvalScene> {
        let initial = self
            .episode
            .states
            .first()
            .cloned()
            .ok_or_else(|| Error::Data("record has no states".into()))?;
        Ok(EvalScene {
            scene: Scene { task: self.episode.task(), initial },
            category: self.category,
            observation: self.observation,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<EpisodeRecord>,
}

/// Generation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenStats {
    pub attempts: usize,
    pub failures: usize,
}

fn check_rate(stats: GenStats) -> Result<()> {
    if stats.attempts > 0 && stats.failures as f64 > MAX_UNSOLVABLE_RATE * stats.attempts as f64 {
        return Err(Error::Data(format!(
            "{} of {} scenes unsolvable (limit {:.0}%)",
            stats.failures,
            stats.attempts,
            MAX_UNSOLVABLE_RATE * 100.0
        )));
    }
    Ok(())
}

fn demo(scene: &Scene, cfg: &EnvConfig, noise: f64, stream: u64, seed: u64) -> Result<Episode> {
    let tokens = tokenize_instruction(&scene.task.instruction)?;
    script_expert(scene, cfg, noise, tokens, &mut stream_rng(seed ^ 0x5eed_0e4e, stream))
}

/// Expert demonstrations, `per_task` for each template.
pub fn generate_train(cfg: &EnvConfig, per_task: usize, seed: u64) -> Result<(Dataset, GenStats)> {
    let mut stats = GenStats::default();
    let mut records = Vec::with_capacity(per_task * TaskTemplate::ALL.len());
    let mut stream = 0u64;
    for template in TaskTemplate::ALL {
        let mut made = 0;
        while made < per_task {
            stats.attempts += 1;
            let s = stream;
            stream += 1;
            let outcome = sample_scene(template, cfg, &mut stream_rng(seed, s))
                .and_then(|scene| demo(&scene, cfg, cfg.expert_noise, s, seed));
            match outcome {
                Ok(episode) => {
                    records.push(EpisodeRecord {
                        stream: s,
                        category: None,
                        observation: ObservationModel::default(),
                        episode,
                    });
                    made += 1;
                }
                Err(Error::Generation(_)) => stats.failures += 1,
                Err(e) => return Err(e),
            }
            check_rate_partial(stats)?;
        }
    }
    check_rate(stats)?;
    let header = DatasetHeader {
        kind: "train".into(),
        suite: None,
        seed,
        env: cfg.clone(),
        perturb: None,
        episodes_per_task: per_task,
    };
    Ok((Dataset { header, records }, stats))
}

// aborts early once failures can no longer stay under the limit for a
// reasonably sized run
fn check_rate_partial(stats: GenStats) -> Result<()> {
    if stats.attempts >= 100 {
        check_rate(stats)
    } else {
        Ok(())
    }
}

/// Evaluation scenes for one suite. Clean and perturbed suites with the same
/// seed share their base scenes. Each record carries the expert's solution
/// of the final scene as a solvability certificate.
pub fn generate_eval(
    cfg: &EnvConfig,
    per_task: usize,
    suite: Option<&PerturbationSuite>,
    seed: u64,
) -> Result<(Dataset, GenStats)> {
    let mut stats = GenStats::default();
    let mut records = Vec::with_capacity(per_task * TaskTemplate::ALL.len());
    let base_seed = seed ^ 0xe7a1_5ce0;
    let mut stream = 0u64;
    for template in TaskTemplate::ALL {
        let mut made = 0;
        while made < per_task {
            stats.attempts += 1;
            let s = stream;
            stream += 1;
            let base = match sample_scene(template, cfg, &mut stream_rng(base_seed, s)) {
                Ok(b) => b,
                Err(Error::Generation(_)) => {
                    stats.failures += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let scene = match suite {
                Some(su) => {
                    let salt = 1 + su.category.index() as u64;
                    perturb(&base, su, cfg.object_region, cfg.min_separation, &mut stream_rng(base_seed ^ salt, s))
                }
                None => Ok(EvalScene { scene: base, category: None, observation: ObservationModel::default() }),
            };
            let outcome = scene.and_then(|sc| demo(&sc.scene, cfg, 0.0, s, seed).map(|ep| (sc, ep)));
            match outcome {
                Ok((sc, episode)) => {
                    records.push(EpisodeRecord {
                        stream: s,
                        category: sc.category,
                        observation: sc.observation,
                        episode,
                    });
                    made += 1;
                }
                Err(Error::Generation(_)) => stats.failures += 1,
                Err(e) => return Err(e),
            }
            check_rate_partial(stats)?;
        }
    }
    check_rate(stats)?;
    let header = DatasetHeader {
        kind: "eval".into(),
        suite: suite.map(|s| s.category),
        seed,
        env: cfg.clone(),
        perturb: suite.map(|s| s.params.clone()),
        episodes_per_task: per_task,
    };
    Ok((Dataset { header, records }, stats))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data(format!("dataset truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn bad(what: &str) -> Error {
    Error::Data(format!("invalid {what} in dataset record"))
}

fn write_record(r: &EpisodeRecord) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let ep = &r.episode;
    w.u64(r.stream);
    w.u32(ep.template.id());
    w.u32(ep.target);
    w.u32(r.category.map(|c| c.index() + 1).unwrap_or(0));
    for p in r.observation.to_params() {
        w.f64(p);
    }
    w.bytes(ep.instruction.as_bytes());
    w.u32(ep.instruction_tokens.len());
    for &t in &ep.instruction_tokens {
        w.u32(t as usize);
    }
    let zones: &[Zone] = ep.states.first().map(|s| s.zones.as_slice()).unwrap_or(&[]);
    w.u32(zones.len());
    for z in zones {
        w.u32(z.name.index());
        for v in [z.min[0], z.min[1], z.max[0], z.max[1]] {
            w.f64(v);
        }
    }
    w.u32(ep.states.len());
    for s in &ep.states {
        w.f64(s.agent_pos[0]);
        w.f64(s.agent_pos[1]);
        w.f64(s.gripper);
        w.f64(s.brightness);
        w.i32(s.held.map(|h| h as i32).unwrap_or(-1));
        w.u32(s.objects.len());
        for o in &s.objects {
            w.u32(o.color.index());
            w.u32(o.shape.index());
            w.f64(o.pos[0]);
            w.f64(o.pos[1]);
        }
    }
    w.u32(ep.expert_actions.len());
    for a in &ep.expert_actions {
        for v in a {
            w.f64(*v);
        }
    }
    w.u32(usize::from(ep.success));
    w.0
}

fn read_record(buf: &[u8]) -> Result<EpisodeRecord> {
    let mut r = Reader { buf, pos: 0 };
    let stream = r.u64()?;
    let template = TaskTemplate::from_id(r.u32()?).ok_or_else(|| bad("template"))?;
    let target = r.u32()?;
    let category = match r.u32()? {
        0 => None,
        c => Some(*Category::ALL.get(c - 1).ok_or_else(|| bad("category"))?),
    };
    let params = (0..5).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let observation = ObservationModel::from_params(&params)?;
    let instruction = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| bad("instruction"))?;
    let n_tok = r.u32()?;
    let instruction_tokens = (0..n_tok).map(|_| r.u32().map(|t| t as u32)).collect::<Result<Vec<_>>>()?;
    let n_zones = r.u32()?;
    let mut zones = Vec::with_capacity(n_zones);
    for _ in 0..n_zones {
        let name = ZoneName::from_index(r.u32()?).ok_or_else(|| bad("zone"))?;
        let v = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        zones.push(Zone { name, min: [v[0], v[1]], max: [v[2], v[3]] });
    }
    let n_states = r.u32()?;
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let agent_pos = [r.f64()?, r.f64()?];
        let gripper = r.f64()?;
        let brightness = r.f64()?;
        let held = match r.i32()? {
            -1 => None,
            h if h >= 0 => Some(h as usize),
            _ => return Err(bad("held index")),
        };
        let n_obj = r.u32()?;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let color = Color::from_index(r.u32()?).ok_or_else(|| bad("color"))?;
            let shape = ShapeKind::from_index(r.u32()?).ok_or_else(|| bad("shape"))?;
            objects.push(Object { color, shape, pos: [r.f64()?, r.f64()?] });
        }
        states.push(EnvState { agent_pos, gripper, objects, held, zones: zones.clone(), brightness });
    }
    let n_act = r.u32()?;
    let expert_actions = (0..n_act)
        .map(|_| Ok([r.f64()?, r.f64()?, r.f64()?]))
        .collect::<Result<Vec<_>>>()?;
    let success = r.u32()? != 0;
    if !r.done() {
        return Err(Error::Data("trailing bytes in dataset record".into()));
    }
    if states.len() != expert_actions.len() + 1 {
        return Err(Error::Data(format!(
            "record has {} states for {} actions",
            states.len(),
            expert_actions.len()
        )));
    }
    Ok(EpisodeRecord {
        stream,
        category,
        observation,
        episode: Episode { template, target, instruction, instruction_tokens, states, expert_actions, success },
    })
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.bytes(serde_json::to_string(&self.header)?.as_bytes());
        w.u32(self.records.len());
        for rec in &self.records {
            let body = write_record(rec);
            w.u64(body.len() as u64);
            w.0.extend_from_slice(&body);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a dataset file".into()));
        }
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("dataset version {version}, expected {FORMAT_VERSION}")));
        }
        let header: DatasetHeader = serde_json::from_slice(r.bytes()?).map_err(|e| Error::Data(format!("dataset header: {e}")))?;
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = usize::try_from(r.u64()?).map_err(|_| bad("record length"))?;
            records.push(read_record(r.take(len)?)?);
        }
        if !r.done() {
            return Err(Error::Data(format!("header declares {count} records but more data follows")));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.records.iter().map(|r| &r.episode)
    }
}

/// Re-steps the recorded expert actions from the first state; returns the
/// first step whose state differs from the record.
pub fn replay_mismatch(episode: &Episode, cfg: &EnvConfig) -> Option<usize> {
    let mut s = episode.states.first()?.clone();
    for (i, a) in episode.expert_actions.iter().enumerate() {
        s = super::step(&s, a, cfg);
        if episode.states.get(i + 1) != Some(&s) {
            return Some(i + 1);
        }
    }
    None
}

/// Checks that `task` is consistent with the record's first state.
pub fn validate_task(episode: &Episode) -> Result<ToyTask> {
    let first = episode.states.first().ok_or_else(|| Error::Data("episode has no states".into()))?;
    ToyTask::new(episode.template, episode.target, first)?;
    Ok(episode.task())
}
