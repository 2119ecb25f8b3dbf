//! Planar pick/push/place environment with a scripted expert.
//!
//! The agent is a point gripper in the unit square moving by clipped
//! position deltas. Closing the gripper within `grab_radius` of an object
//! attaches it; attached objects follow the agent until the gripper opens.
//! Actions are `(Δx, Δy, grip)` with `grip > 0.5` meaning closed.

pub mod dataset;
pub mod perturb;
pub mod rollout;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 3;

pub type Action = [f64; ACTION_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cube,
    Ball,
    Ring,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneName {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Pick,
    Push,
    Place,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Nominal hue reported to the observation encoder.
    pub fn hue(self) -> f64 {
        0.125 + 0.25 * self.index() as f64
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Cube, ShapeKind::Ball, ShapeKind::Ring, ShapeKind::Block];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Ball => "ball",
            ShapeKind::Ring => "ring",
            ShapeKind::Block => "block",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl ZoneName {
    pub const ALL: [ZoneName; 4] = [ZoneName::Left, ZoneName::Right, ZoneName::Top, ZoneName::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            ZoneName::Left => "left",
            ZoneName::Right => "right",
            ZoneName::Top => "top",
            ZoneName::Bottom => "bottom",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: ZoneName,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Zone {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }
}

/// The four edge regions of the table.
pub fn default_zones() -> Vec<Zone> {
    vec![
        Zone { name: ZoneName::Left, min: [0.0, 0.2], max: [0.2, 0.8] },
        Zone { name: ZoneName::Right, min: [0.8, 0.2], max: [1.0, 0.8] },
        Zone { name: ZoneName::Top, min: [0.2, 0.8], max: [0.8, 1.0] },
        Zone { name: ZoneName::Bottom, min: [0.2, 0.0], max: [0.8, 0.2] },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: ShapeKind,
    pub pos: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    /// 0 = open, 1 = closed.
    pub gripper: f64,
    pub objects: Vec<Object>,
    pub held: Option<usize>,
    pub zones: Vec<Zone>,
    /// Scale applied to reported hues (1 = nominal lighting).
    pub brightness: f64,
}

impl EnvState {
    pub fn zone(&self, name: ZoneName) -> Option<&Zone> {
        self.zones.iter().find(|z| z.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub delta_max: f64,
    pub grab_radius: f64,
    pub max_steps: usize,
    pub n_distractors: usize,
    /// Axis-aligned region `[x0, y0, x1, y1]` for initial object placement.
    pub object_region: [f64; 4],
    pub min_separation: f64,
    pub agent_home: [f64; 2],
    pub home_jitter: f64,
    /// Expert action noise as a fraction of `delta_max`.
    pub expert_noise: f64,
    /// Distance at which the expert treats a waypoint as reached.
    pub reach_tol: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.02,
            grab_radius: 0.05,
            max_steps: 200,
            n_distractors: 2,
            object_region: [0.3, 0.35, 0.7, 0.7],
            min_separation: 0.12,
            agent_home: [0.5, 0.1],
            home_jitter: 0.05,
            expert_noise: 0.1,
            reach_tol: 0.01,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances the environment by one clipped action. Pure and total.
pub fn step(state: &EnvState, action: &Action, cfg: &EnvConfig) -> EnvState {
    let mut next = state.clone();
    let dm = cfg.delta_max;
    let dx = action[0].clamp(-dm, dm);
    let dy = action[1].clamp(-dm, dm);
    next.agent_pos = [
        (state.agent_pos[0] + dx).clamp(0.0, 1.0),
        (state.agent_pos[1] + dy).clamp(0.0, 1.0),
    ];
    let closing = action[2].clamp(0.0, 1.0) > 0.5;
    if closing {
        if state.gripper < 0.5 {
            next.held = next
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, dist(o.pos, next.agent_pos)))
                .filter(|&(_, d)| d <= cfg.grab_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
        }
        next.gripper = 1.0;
    } else {
        next.held = None;
        next.gripper = 0.0;
    }
    if let Some(h) = next.held {
        next.objects[h].pos = next.agent_pos;
    }
    next
}

/// Maps raw actions to the unit-scale space the flow models work in:
/// deltas divided by `delta_max`, gripper `{0, 1}` mapped to `{-1, 1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionNormalizer {
    pub delta_max: f64,
}

impl ActionNormalizer {
    pub fn new(cfg: &EnvConfig) -> Self {
        Self { delta_max: cfg.delta_max }
    }

    pub fn normalize(&self, a: &Action) -> Action {
        [a[0] / self.delta_max, a[1] / self.delta_max, 2.0 * a[2] - 1.0]
    }

    pub fn denormalize(&self, v: &[f64]) -> Action {
        [v[0] * self.delta_max, v[1] * self.delta_max, (v[2] + 1.0) / 2.0]
    }

    /// Stacks normalized actions into an `n × 3` tensor.
    pub fn to_tensor(&self, actions: &[Action]) -> crate::tensor::Tensor {
        let rows: Vec<Action> = actions.iter().map(|a| self.normalize(a)).collect();
        crate::tensor::Tensor::from_rows(&rows).expect("non-empty action list")
    }
}

/// Actions at `t, t + shift, t + 2·shift, …` (`horizon` entries); indices
/// past the end hold the final action.
pub fn subsample_actions(actions: &[Action], t: usize, shift: usize, horizon: usize) -> Result<Vec<Action>> {
    let last = actions
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Data("episode has no expert actions".into()))?;
    if shift == 0 || horizon == 0 {
        return Err(Error::Config("shift and horizon must be >= 1".into()));
    }
    if t > last {
        return Err(Error::Data(format!("step {t} beyond episode of {} actions", actions.len())));
    }
    Ok((0..horizon).map(|k| actions[(t + k * shift).min(last)]).collect())
}

/// One of the eight instruction templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub verb: Verb,
    pub zone: Option<ZoneName>,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 8] = [
        TaskTemplate { verb: Verb::Pick, zone: None },
        TaskTemplate { verb: Verb::Push, zone: Some(ZoneName::Left) },
        TaskTemplate { verb: Verb::Push, zone: Some(ZoneName::Right) },
        TaskTemplate { verb: Verb::Push, zone: Some(ZoneName::Top) },
        TaskTemplate { verb: Verb::Place, zone: Some(ZoneName::Left) },
        TaskTemplate { verb: Verb::Place, zone: Some(ZoneName::Right) },
        TaskTemplate { verb: Verb::Place, zone: Some(ZoneName::Top) },
        TaskTemplate { verb: Verb::Place, zone: Some(ZoneName::Bottom) },
    ];

    pub fn id(&self) -> usize {
        Self::ALL.iter().position(|t| t == self).expect("known template")
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(&self) -> String {
        match (self.verb, self.zone) {
            (Verb::Pick, _) => "pick".to_string(),
            (Verb::Push, Some(z)) => format!("push-{}", z.word()),
            (Verb::Place, Some(z)) => format!("place-{}", z.word()),
            (v, None) => format!("{v:?}").to_lowercase(),
        }
    }

    /// Canonical instruction text.
    pub fn instruction(&self, color: Color, shape: ShapeKind) -> String {
        let (c, s) = (color.word(), shape.word());
        match (self.verb, self.zone) {
            (Verb::Pick, _) => format!("pick the {c} {s}"),
            (Verb::Push, Some(z)) => format!("push the {c} {s} to the {}", z.word()),
            (Verb::Place, Some(z)) => format!("place the {c} {s} in the {}", z.word()),
            (_, None) => format!("pick the {c} {s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub template: TaskTemplate,
    /// Index of the referenced object in the scene.
    pub target: usize,
    pub instruction: String,
}

impl ToyTask {
    pub fn new(template: TaskTemplate, target: usize, scene: &EnvState) -> Result<Self> {
        let obj = scene
            .objects
            .get(target)
            .ok_or_else(|| Error::Data(format!("target index {target} not in scene")))?;
        if let Some(z) = template.zone {
            if scene.zone(z).is_none() {
                return Err(Error::Data(format!("zone {z:?} not in scene")));
            }
        }
        Ok(Self {
            template,
            target,
            instruction: template.instruction(obj.color, obj.shape),
        })
    }

    pub fn is_success(&self, state: &EnvState) -> bool {
        let obj = &state.objects[self.target];
        let in_zone = |z: ZoneName| state.zone(z).map(|zz| zz.contains(obj.pos)).unwrap_or(false);
        match (self.template.verb, self.template.zone) {
            (Verb::Pick, _) => state.held == Some(self.target),
            (Verb::Push, Some(z)) => in_zone(z),
            (Verb::Place, Some(z)) => in_zone(z) && state.held != Some(self.target),
            (_, None) => false,
        }
    }

    /// Waypoint the expert transports the object to.
    pub fn goal_point(&self, state: &EnvState) -> Option<[f64; 2]> {
        self.template.zone.and_then(|z| state.zone(z)).map(Zone::center)
    }
}

/// A task together with its initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: ToyTask,
    pub initial: EnvState,
}

fn sample_in<R: Rng + ?Sized>(region: [f64; 4], rng: &mut R) -> [f64; 2] {
    [rng.gen_range(region[0]..=region[2]), rng.gen_range(region[1]..=region[3])]
}

/// Places `objects` in `region` with pairwise separation; `None` after too
/// many rejections.
pub(crate) fn place_objects<R: Rng + ?Sized>(
    kinds: &[(Color, ShapeKind)],
    region: [f64; 4],
    min_sep: f64,
    rng: &mut R,
) -> Option<Vec<Object>> {
    for _ in 0..200 {
        let mut out: Vec<Object> = Vec::with_capacity(kinds.len());
        let mut ok = true;
        for &(color, shape) in kinds {
            let mut placed = false;
            for _ in 0..100 {
                let p = sample_in(region, rng);
                if out.iter().all(|o| dist(o.pos, p) >= min_sep) {
                    out.push(Object { color, shape, pos: p });
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return Some(out);
        }
    }
    None
}

/// Kinds that differ from any target in both color and shape.
pub const MAX_DISTRACTORS: usize = 9;

/// Distractor kinds sharing neither color nor shape with `target`, and
/// distinct from each other.
pub(crate) fn sample_distractors<R: Rng + ?Sized>(
    target: (Color, ShapeKind),
    n: usize,
    rng: &mut R,
) -> Result<Vec<(Color, ShapeKind)>> {
    if n > MAX_DISTRACTORS {
        return Err(Error::Generation(format!("at most {MAX_DISTRACTORS} distractors fit, asked for {n}")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = Color::ALL[rng.gen_range(0..4)];
        let s = ShapeKind::ALL[rng.gen_range(0..4)];
        if c != target.0 && s != target.1 && !out.contains(&(c, s)) {
            out.push((c, s));
        }
    }
    Ok(out)
}

/// Samples a training scene for `template`.
pub fn sample_scene<R: Rng + ?Sized>(template: TaskTemplate, cfg: &EnvConfig, rng: &mut R) -> Result<Scene> {
    let target_kind = (Color::ALL[rng.gen_range(0..4)], ShapeKind::ALL[rng.gen_range(0..4)]);
    let mut kinds = vec![target_kind];
    kinds.extend(sample_distractors(target_kind, cfg.n_distractors, rng)?);
    let mut objects = place_objects(&kinds, cfg.object_region, cfg.min_separation, rng)
        .ok_or_else(|| Error::Generation("could not place objects".into()))?;
    // the target's slot in the scene is random
    let target = rng.gen_range(0..objects.len());
    objects.swap(0, target);
    let j = cfg.home_jitter;
    let agent_pos = [
        (cfg.agent_home[0] + rng.gen_range(-j..=j)).clamp(0.0, 1.0),
        (cfg.agent_home[1] + rng.gen_range(-j..=j)).clamp(0.0, 1.0),
    ];
    let initial = EnvState {
        agent_pos,
        gripper: 0.0,
        objects,
        held: None,
        zones: default_zones(),
        brightness: 1.0,
    };
    let task = ToyTask::new(template, target, &initial)?;
    Ok(Scene { task, initial })
}

/// One expert demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub template: TaskTemplate,
    pub target: usize,
    pub instruction: String,
    pub instruction_tokens: Vec<u32>,
    pub states: Vec<EnvState>,
    pub expert_actions: Vec<Action>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.expert_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expert_actions.is_empty()
    }

    pub fn task(&self) -> ToyTask {
        ToyTask {
            template: self.template,
            target: self.target,
            instruction: self.instruction.clone(),
        }
    }
}

/// Reactive expert controller: one action for the current state.
///
/// `noise` scales uniform perturbations of the commanded deltas.
pub fn expert_action<R: Rng + ?Sized>(
    task: &ToyTask,
    state: &EnvState,
    cfg: &EnvConfig,
    noise: f64,
    rng: &mut R,
) -> Action {
    let dm = cfg.delta_max;
    let mut toward = |goal: [f64; 2], grip: f64| -> Action {
        let mut a = [goal[0] - state.agent_pos[0], goal[1] - state.agent_pos[1], grip];
        for v in a.iter_mut().take(2) {
            let n = if noise > 0.0 { rng.gen_range(-noise..=noise) * dm } else { 0.0 };
            *v = v.clamp(-dm, dm) + n;
            *v = v.clamp(-dm, dm);
        }
        a
    };
    let target = &state.objects[task.target];
    if state.held != Some(task.target) {
        if state.gripper > 0.5 {
            // holding nothing useful: open first
            return [0.0, 0.0, 0.0];
        }
        if dist(state.agent_pos, target.pos) > cfg.reach_tol {
            return toward(target.pos, 0.0);
        }
        return [0.0, 0.0, 1.0];
    }
    match task.goal_point(state) {
        Some(goal) if dist(state.agent_pos, goal) > cfg.reach_tol => toward(goal, 1.0),
        Some(_) => match task.template.verb {
            Verb::Place => [0.0, 0.0, 0.0],
            _ => [0.0, 0.0, 1.0],
        },
        None => [0.0, 0.0, 1.0],
    }
}

/// Runs the scripted expert from the scene's initial state until success
/// or `cfg.max_steps`.
pub fn script_expert<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &EnvConfig,
    noise: f64,
    instruction_tokens: Vec<u32>,
    rng: &mut R,
) -> Result<Episode> {
    let task = &scene.task;
    let mut state = scene.initial.clone();
    let mut states = vec![state.clone()];
    let mut actions = Vec::new();
    let mut success = task.is_success(&state);
    while !success && actions.len() < cfg.max_steps {
        let a = expert_action(task, &state, cfg, noise, rng);
        state = step(&state, &a, cfg);
        states.push(state.clone());
        actions.push(a);
        success = task.is_success(&state);
    }
    if !success {
        return Err(Error::Generation(format!(
            "expert failed '{}' within {} steps",
            task.instruction, cfg.max_steps
        )));
    }
    Ok(Episode {
        template: task.template,
        target: task.target,
        instruction: task.instruction.clone(),
        instruction_tokens,
        states,
        expert_actions: actions,
        success,
    })
}
