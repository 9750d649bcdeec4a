use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pool::{EnvPoolEntry, EnvRef};
use crate::agent::{act, ActMode, ActorCritic, AgentModel, LearnError, Transition};
use crate::dungeon::{Action, CompiledLevel, EndCause, GameState};
use crate::generator::{reconstruction_update, GeneratorModel};
use crate::par;
use crate::tensor::{AdamState, Real, Tensor, TensorError};

/// Per-purpose random stream for `(seed, iteration, stream)`, so that any
/// iteration can be replayed without carrying generator state around.
pub fn stream_rng(seed: u64, iteration: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    key[24..].copy_from_slice(b"gpn-rngs");
    ChaCha8Rng::from_seed(key)
}

/// The levels an episode may be drawn from.
#[derive(Clone, Copy)]
pub struct EnvSet<'a> {
    pub pool: &'a [EnvPoolEntry],
    pub curated: &'a [CompiledLevel],
}

impl EnvSet<'_> {
    pub fn get(&self, r: EnvRef) -> &CompiledLevel {
        match r {
            EnvRef::Pool(i) => &self.pool[i].compiled,
            EnvRef::Curated(i) => &self.curated[i],
        }
    }
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub source: EnvRef,
    pub reward: f64,
    pub frames: u32,
    pub cause: EndCause,
}

impl EpisodeRecord {
    pub fn won(&self) -> bool {
        self.cause == EndCause::Win
    }
}

#[derive(Clone, Debug)]
struct Live<T> {
    source: EnvRef,
    state: GameState,
    obs: Tensor<T>,
    hidden: Option<Tensor<T>>,
}

/// A rollout worker owns its episode in progress and its random stream.
#[derive(Clone, Debug)]
pub struct RolloutWorker<T> {
    rng: ChaCha8Rng,
    live: Option<Live<T>>,
    mode: ActMode,
}

#[derive(Clone, Debug, Default)]
pub struct Segment<T> {
    pub transitions: Vec<Transition<T>>,
    pub episodes: Vec<EpisodeRecord>,
}

impl<T: Real> RolloutWorker<T> {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            live: None,
            mode: ActMode::Sample,
        }
    }

    pub fn greedy(mut self) -> Self {
        self.mode = ActMode::Greedy;
        self
    }

    /// Plays `steps` environment steps against a fixed parameter snapshot,
    /// starting new episodes as needed. `select` picks each new level.
    pub fn collect<S>(
        &mut self,
        agent: &AgentModel<T>,
        steps: usize,
        envs: EnvSet<'_>,
        select: S,
    ) -> Result<Segment<T>, TensorError>
    where
        S: Fn(&mut ChaCha8Rng) -> Option<EnvRef>,
    {
        let mut seg = Segment {
            transitions: Vec::with_capacity(steps),
            episodes: Vec::new(),
        };
        for _ in 0..steps {
            let live = match self.live.take() {
                Some(l) => l,
                None => {
                    let Some(source) = select(&mut self.rng) else { break };
                    let state = envs.get(source).reset(rand::Rng::random(&mut self.rng));
                    let obs = state.observe();
                    Live {
                        source,
                        state,
                        obs,
                        hidden: None,
                    }
                }
            };
            let Live {
                source,
                mut state,
                obs,
                hidden,
            } = live;
            let (eval, next_hidden) = agent.step(&obs, hidden.as_ref())?;
            let a = act(&eval.policy.probs, &mut self.rng, self.mode);
            let out = state
                .step::<T>(Action::from_index(a).expect("policy covers the action set"))
                .expect("live episodes are never terminal");
            if out.terminal {
                seg.episodes.push(EpisodeRecord {
                    source,
                    reward: state.total_reward(),
                    frames: state.steps(),
                    cause: out.cause.unwrap_or(EndCause::Timeout),
                });
                seg.transitions.push(Transition {
                    observation: obs,
                    action: a,
                    reward: out.reward,
                    next_observation: None,
                    hidden,
                });
            } else {
                seg.transitions.push(Transition {
                    observation: obs,
                    action: a,
                    reward: out.reward,
                    next_observation: Some(out.observation.clone()),
                    hidden,
                });
                self.live = Some(Live {
                    source,
                    state,
                    obs: out.observation,
                    hidden: next_hidden,
                });
            }
        }
        Ok(seg)
    }
}

/// Reconstruction pathway run alongside the agent updates.
pub struct Reconstruction<'a, T> {
    pub generator: &'a mut GeneratorModel<T>,
    pub gen_opt: &'a mut AdamState<T>,
    pub enc_opt: &'a mut AdamState<T>,
    pub rng: ChaCha8Rng,
}

/// Totals over one agent phase.
#[derive(Clone, Debug, Default)]
pub struct PhaseStats {
    pub frames: u64,
    pub updates: u64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub recon_loss: f64,
    pub recon_updates: u64,
    pub episodes: Vec<EpisodeRecord>,
}

impl PhaseStats {
    pub fn mean_value_loss(&self) -> f64 {
        self.value_loss / self.updates.max(1) as f64
    }

    pub fn mean_policy_loss(&self) -> f64 {
        self.policy_loss / self.updates.max(1) as f64
    }

    pub fn mean_recon_loss(&self) -> Option<f64> {
        (self.recon_updates > 0).then(|| self.recon_loss / self.recon_updates as f64)
    }
}

/// Alternates worker collection (`n` steps each, in parallel) with one
/// learner update over everything collected, until `steps` frames have
/// been played. Episodes still running at the end are dropped.
pub fn run_agent_phase<T, S>(
    learner: &mut ActorCritic<T>,
    mut recon: Option<Reconstruction<'_, T>>,
    workers: &mut [RolloutWorker<T>],
    envs: EnvSet<'_>,
    steps: u64,
    n: usize,
    select: S,
) -> Result<PhaseStats, LearnError>
where
    T: Real,
    S: Fn(&mut ChaCha8Rng) -> Option<EnvRef> + Sync,
{
    let mut stats = PhaseStats::default();
    while stats.frames < steps {
        let model = &learner.model;
        let segments = par::map_mut(workers, |_, w| w.collect(model, n, envs, &select));
        let mut batch = Vec::new();
        for seg in segments {
            let seg = seg?;
            batch.extend(seg.transitions);
            stats.episodes.extend(seg.episodes);
        }
        if batch.is_empty() {
            break;
        }
        stats.frames += batch.len() as u64;
        let (losses, _) = learner.update(&batch)?;
        stats.updates += 1;
        stats.value_loss += losses.value_loss;
        stats.policy_loss += losses.policy_loss;
        stats.entropy += losses.entropy;
        if let Some(r) = recon.as_mut() {
            let obs: Vec<&Tensor<T>> = batch.iter().map(|t| &t.observation).collect();
            stats.recon_loss += reconstruction_update(
                r.generator,
                &mut learner.model,
                r.gen_opt,
                r.enc_opt,
                &obs,
                &mut r.rng,
            )?;
            stats.recon_updates += 1;
        }
    }
    for w in workers.iter_mut() {
        w.live = None;
    }
    Ok(stats)
}
