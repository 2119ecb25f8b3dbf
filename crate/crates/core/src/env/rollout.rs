//! Open-loop chunk execution against the environment.

use rand::{Rng, RngCore};

use super::perturb::EvalScene;
use super::{expert_action, step, Action, EnvConfig, EnvState, ToyTask};
use crate::error::Result;

/// What a policy sees when asked for a chunk.
#[derive(Clone, Copy, Debug)]
pub struct PolicyContext<'a> {
    /// The (possibly perturbed) reported state.
    pub observed: &'a EnvState,
    /// Ground truth, for privileged policies such as the expert.
    pub state: &'a EnvState,
    pub task: &'a ToyTask,
}

pub trait ChunkPolicy {
    /// Actions to execute next; the caller runs at most `execute_k` of them.
    fn predict(&self, ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<Action>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutOutcome {
    pub success: bool,
    pub steps: usize,
}

/// Runs `policy` from the scene's initial state, executing up to
/// `execute_k` actions per chunk, for at most `cfg.max_steps` steps.
pub fn rollout<P: ChunkPolicy + ?Sized>(
    policy: &P,
    scene: &EvalScene,
    cfg: &EnvConfig,
    execute_k: usize,
    rng: &mut dyn RngCore,
) -> Result<RolloutOutcome> {
    let task = &scene.scene.task;
    let mut state = scene.scene.initial.clone();
    let mut steps = 0;
    if task.is_success(&state) {
        return Ok(RolloutOutcome { success: true, steps });
    }
    while steps < cfg.max_steps {
        let observed = scene.observation.observe(&state, rng);
        let chunk = policy.predict(&PolicyContext { observed: &observed, state: &state, task }, rng)?;
        if chunk.is_empty() {
            break;
        }
        for a in chunk.iter().take(execute_k.max(1)) {
            state = step(&state, a, cfg);
            steps += 1;
            if task.is_success(&state) {
                return Ok(RolloutOutcome { success: true, steps });
            }
            if steps >= cfg.max_steps {
                break;
            }
        }
    }
    Ok(RolloutOutcome { success: false, steps })
}

/// The scripted expert planning `chunk` steps ahead from the true state.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub cfg: EnvConfig,
    pub chunk: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn predict(&self, ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<Action>> {
        let mut s = ctx.state.clone();
        let mut out = Vec::with_capacity(self.chunk);
        for _ in 0..self.chunk {
            let a = expert_action(ctx.task, &s, &self.cfg, 0.0, rng);
            s = step(&s, &a, &self.cfg);
            out.push(a);
        }
        Ok(out)
    }
}

/// Uniformly random deltas and gripper commands.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub delta_max: f64,
    pub chunk: usize,
}

impl ChunkPolicy for RandomPolicy {
    fn predict(&self, _ctx: &PolicyContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<Action>> {
        let d = self.delta_max;
        Ok((0..self.chunk)
            .map(|_| [rng.gen_range(-d..=d), rng.gen_range(-d..=d), f64::from(rng.gen_bool(0.5))])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::perturb::{stream_rng, ObservationModel};
    use crate::env::{sample_scene, TaskTemplate};

    fn clean(template: TaskTemplate, i: u64) -> EvalScene {
        EvalScene {
            scene: sample_scene(template, &EnvConfig::default(), &mut stream_rng(11, i)).unwrap(),
            category: None,
            observation: ObservationModel::default(),
        }
    }

    #[test]
    fn expert_policy_always_succeeds() {
        let cfg = EnvConfig::default();
        let p = ExpertPolicy { cfg: cfg.clone(), chunk: 8 };
        for (i, t) in TaskTemplate::ALL.iter().enumerate() {
            for j in 0..5 {
                let o = rollout(&p, &clean(*t, (i * 5 + j) as u64), &cfg, 4, &mut stream_rng(0, j as u64)).unwrap();
                assert!(o.success, "{}", t.name());
            }
        }
    }

    #[test]
    fn random_policy_rarely_picks() {
        let cfg = EnvConfig::default();
        let p = RandomPolicy { delta_max: cfg.delta_max, chunk: 8 };
        let wins = (0..100)
            .filter(|&i| rollout(&p, &clean(TaskTemplate::ALL[0], i), &cfg, 4, &mut stream_rng(1, i)).unwrap().success)
            .count();
        assert!(wins < 5, "{wins}");
    }

    #[test]
    fn rollouts_are_seeded() {
        let cfg = EnvConfig::default();
        let p = RandomPolicy { delta_max: cfg.delta_max, chunk: 8 };
        let s = clean(TaskTemplate::ALL[2], 3);
        let a = rollout(&p, &s, &cfg, 4, &mut stream_rng(2, 0)).unwrap();
        let b = rollout(&p, &s, &cfg, 4, &mut stream_rng(2, 0)).unwrap();
        assert_eq!(a, b);
    }
}
