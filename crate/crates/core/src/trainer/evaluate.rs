use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{act, ActMode, AgentModel};
use crate::dungeon::{Action, CompiledLevel, EndCause};
use crate::tensor::{Real, TensorError};

/// Plays one episode to the end.
pub fn play_episode<T: Real>(
    agent: &AgentModel<T>,
    level: &CompiledLevel,
    rng: &mut impl Rng,
    mode: ActMode,
) -> Result<(f64, u32, EndCause), TensorError> {
    let mut state = level.reset(rng.random());
    let mut hidden = None;
    loop {
        let (eval, next) = agent.step(&state.observe::<T>(), hidden.as_ref())?;
        hidden = next;
        let a = act(&eval.policy.probs, rng, mode);
        let out = state
            .step::<T>(Action::from_index(a).expect("policy covers the action set"))
            .expect("episode is live");
        if out.terminal {
            return Ok((state.total_reward(), state.steps(), out.cause.unwrap_or(EndCause::Timeout)));
        }
    }
}

/// Per-level evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelReport {
    pub valid: bool,
    pub episodes: usize,
    pub win_rate: f64,
    pub mean_reward: f64,
    pub mean_frames: f64,
    /// Agent estimate for the level's initial observation.
    pub estimated_u0: f64,
    /// `|estimated_u0 − mean_reward|`.
    pub gap: f64,
}

pub fn evaluate_level<T: Real>(
    agent: &AgentModel<T>,
    level: &CompiledLevel,
    episodes: usize,
    seed: u64,
    mode: ActMode,
) -> Result<LevelReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let estimated_u0 = agent.evaluate_one(&level.initial_observation::<T>())?.utility;
    let (mut wins, mut reward, mut frames) = (0usize, 0.0, 0u64);
    for _ in 0..episodes {
        let (r, f, cause) = play_episode(agent, level, &mut rng, mode)?;
        wins += (cause == EndCause::Win) as usize;
        reward += r;
        frames += f as u64;
    }
    let n = episodes.max(1) as f64;
    let mean_reward = reward / n;
    Ok(LevelReport {
        valid: level.is_valid(),
        episodes,
        win_rate: wins as f64 / n,
        mean_reward,
        mean_frames: frames as f64 / n,
        estimated_u0,
        gap: (estimated_u0 - mean_reward).abs(),
    })
}
