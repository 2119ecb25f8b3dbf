//! Seven evaluation perturbation categories.
//!
//! `light` and `background` are analogs: there is no renderer, so light
//! scales the reported hue channel and background swaps the distractor set.
//! Camera, light and noise act on what the policy observes; robot,
//! background and layout act on the scene itself; language rewrites the
//! instruction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{place_objects, sample_distractors, EnvState, Object, Scene, ToyTask, Verb};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Camera,
    Robot,
    Language,
    Light,
    Background,
    Noise,
    Layout,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Camera,
        Category::Robot,
        Category::Language,
        Category::Light,
        Category::Background,
        Category::Noise,
        Category::Layout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Camera => "camera",
            Category::Robot => "robot",
            Category::Language => "language",
            Category::Light => "light",
            Category::Background => "background",
            Category::Noise => "noise",
            Category::Layout => "layout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation category '{s}'")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Category parameters. Zero magnitudes are identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbParams {
    /// Maximum viewpoint translation per axis.
    pub camera_shift: f64,
    /// Maximum viewpoint rotation in radians about the table center.
    pub camera_rotation: f64,
    /// Half-width of the random agent start box around the table center.
    pub robot_spread: f64,
    /// Apply paraphrased instructions.
    pub paraphrase: bool,
    /// Maximum relative change of the reported hue.
    pub light_scale: f64,
    /// Number of distractors after resampling; 0 keeps the scene.
    pub background_distractors: usize,
    pub noise_sigma: f64,
    /// Placement region for the layout category; `None` keeps the scene.
    pub layout_region: Option<[f64; 4]>,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self {
            camera_shift: 0.04,
            camera_rotation: 0.1,
            robot_spread: 0.4,
            paraphrase: true,
            light_scale: 0.15,
            background_distractors: 3,
            noise_sigma: 0.02,
            layout_region: Some([0.22, 0.22, 0.78, 0.78]),
        }
    }
}

impl PerturbParams {
    pub fn identity() -> Self {
        Self {
            camera_shift: 0.0,
            camera_rotation: 0.0,
            robot_spread: 0.0,
            paraphrase: false,
            light_scale: 0.0,
            background_distractors: 0,
            noise_sigma: 0.0,
            layout_region: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSuite {
    pub category: Category,
    pub params: PerturbParams,
}

/// How the true state is reported to the policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub shift: [f64; 2],
    pub rotation: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self {
            shift: [0.0, 0.0],
            rotation: 0.0,
            brightness: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl ObservationModel {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Encodes the model as `[shift_x, shift_y, rotation, brightness, sigma]`.
    pub fn to_params(&self) -> Vec<f64> {
        vec![self.shift[0], self.shift[1], self.rotation, self.brightness, self.noise_sigma]
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        match p {
            [sx, sy, r, b, s] => Ok(Self {
                shift: [*sx, *sy],
                rotation: *r,
                brightness: *b,
                noise_sigma: *s,
            }),
            _ => Err(Error::Data(format!("observation model needs 5 params, got {}", p.len()))),
        }
    }

    /// Reported view of `state`. `rng` drives sensor noise only.
    pub fn observe<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> EnvState {
        if self.is_identity() {
            return state.clone();
        }
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let (sin, cos) = self.rotation.sin_cos();
        let mut map = |p: [f64; 2]| -> [f64; 2] {
            let (x, y) = (p[0] - 0.5, p[1] - 0.5);
            let mut q = [cos * x - sin * y + 0.5 + self.shift[0], sin * x + cos * y + 0.5 + self.shift[1]];
            if self.noise_sigma > 0.0 {
                q[0] += noise.sample(rng);
                q[1] += noise.sample(rng);
            }
            [q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)]
        };
        let mut view = state.clone();
        view.agent_pos = map(state.agent_pos);
        for o in &mut view.objects {
            o.pos = map(o.pos);
        }
        view.brightness = state.brightness * self.brightness;
        view
    }
}

/// A possibly perturbed evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub scene: Scene,
    pub category: Option<Category>,
    pub observation: ObservationModel,
}

const PICK_PARAPHRASES: [&str; 3] = ["grab the {c} {s}", "lift the {c} {s}", "take the {c} {s}"];
const PUSH_PARAPHRASES: [&str; 3] = [
    "slide the {c} {s} to the {z}",
    "shove the {c} {s} toward the {z}",
    "move the {c} {s} to the {z} side",
];
const PLACE_PARAPHRASES: [&str; 3] = [
    "put the {c} {s} in the {z}",
    "drop the {c} {s} into the {z}",
    "set the {c} {s} in the {z} area",
];

/// Every word the paraphrase templates can emit besides colors, shapes and zones.
pub const PARAPHRASE_WORDS: [&str; 13] = [
    "grab", "lift", "take", "slide", "shove", "toward", "move", "side", "put", "drop", "into", "set", "area",
];

fn paraphrase<R: Rng + ?Sized>(task: &ToyTask, state: &EnvState, rng: &mut R) -> String {
    let obj = &state.objects[task.target];
    let pool: &[&str] = match task.template.verb {
        Verb::Pick => &PICK_PARAPHRASES,
        Verb::Push => &PUSH_PARAPHRASES,
        Verb::Place => &PLACE_PARAPHRASES,
    };
    let tpl = pool.choose(rng).expect("non-empty pool");
    tpl.replace("{c}", obj.color.word())
        .replace("{s}", obj.shape.word())
        .replace("{z}", task.template.zone.map(|z| z.word()).unwrap_or(""))
}

/// Applies one perturbation category to a clean scene.
pub fn perturb<R: Rng + ?Sized>(
    scene: &Scene,
    suite: &PerturbationSuite,
    region_fallback: [f64; 4],
    min_sep: f64,
    rng: &mut R,
) -> Result<EvalScene> {
    let p = &suite.params;
    let mut out = EvalScene {
        scene: scene.clone(),
        category: Some(suite.category),
        observation: ObservationModel::default(),
    };
    let state = &mut out.scene.initial;
    match suite.category {
        Category::Camera => {
            if p.camera_shift > 0.0 {
                out.observation.shift = [
                    rng.gen_range(-p.camera_shift..=p.camera_shift),
                    rng.gen_range(-p.camera_shift..=p.camera_shift),
                ];
            }
            if p.camera_rotation > 0.0 {
                out.observation.rotation = rng.gen_range(-p.camera_rotation..=p.camera_rotation);
            }
        }
        Category::Robot => {
            if p.robot_spread > 0.0 {
                let s = p.robot_spread;
                state.agent_pos = [0.5 + rng.gen_range(-s..=s), 0.5 + rng.gen_range(-s..=s)];
            }
        }
        Category::Language => {
            if p.paraphrase {
                out.scene.task.instruction = paraphrase(&out.scene.task, state, rng);
            }
        }
        Category::Light => {
            if p.light_scale > 0.0 {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                out.observation.brightness = 1.0 + sign * rng.gen_range(p.light_scale / 2.0..=p.light_scale);
            }
        }
        Category::Background => {
            if p.background_distractors > 0 {
                let t = state.objects[out.scene.task.target];
                let kinds = sample_distractors((t.color, t.shape), p.background_distractors, rng)?;
                let mut all = vec![(t.color, t.shape)];
                all.extend(kinds);
                // keep the target where it is; resample everything else
                let mut placed: Option<Vec<Object>> = None;
                for _ in 0..50 {
                    if let Some(objs) = place_objects(&all, region_fallback, min_sep, rng) {
                        let mut objs = objs;
                        objs[0].pos = t.pos;
                        let ok = objs[1..]
                            .iter()
                            .all(|o| ((o.pos[0] - t.pos[0]).powi(2) + (o.pos[1] - t.pos[1]).powi(2)).sqrt() >= min_sep);
                        if ok {
                            placed = Some(objs);
                            break;
                        }
                    }
                }
                let objs = placed.ok_or_else(|| Error::Generation("background resampling failed".into()))?;
                state.objects = objs;
                out.scene.task.target = 0;
            }
        }
        Category::Noise => {
            out.observation.noise_sigma = p.noise_sigma;
        }
        Category::Layout => {
            if let Some(region) = p.layout_region {
                let kinds: Vec<_> = state.objects.iter().map(|o| (o.color, o.shape)).collect();
                state.objects = place_objects(&kinds, region, min_sep, rng)
                    .ok_or_else(|| Error::Generation("layout resampling failed".into()))?;
            }
        }
    }
    Ok(out)
}

/// Independent RNG stream `index` of `master` (counter-derived).
pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}
