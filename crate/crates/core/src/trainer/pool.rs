use rand::Rng;

use super::config::{elite_count, Mode};
use crate::dungeon::{compile_level, CompiledLevel, DungeonConfig, LevelMap, Origin};

/// A level in play together with what the agent has scored on it.
#[derive(Clone, Debug)]
pub struct EnvPoolEntry {
    pub compiled: CompiledLevel,
    pub episodes: u32,
    pub cumulative_reward: f64,
}

impl EnvPoolEntry {
    pub fn new(level: LevelMap, dungeon: &DungeonConfig) -> Self {
        Self {
            compiled: compile_level(&level, dungeon),
            episodes: 0,
            cumulative_reward: 0.0,
        }
    }

    pub fn level(&self) -> &LevelMap {
        self.compiled.level()
    }

    pub fn origin(&self) -> Origin {
        self.compiled.level().origin
    }

    pub fn is_valid(&self) -> bool {
        self.compiled.is_valid()
    }

    /// Mean episode reward, `None` before the first episode.
    pub fn average_reward(&self) -> Option<f64> {
        (self.episodes > 0).then(|| self.cumulative_reward / self.episodes as f64)
    }

    pub fn record(&mut self, reward: f64) {
        self.episodes += 1;
        self.cumulative_reward += reward;
    }
}

/// Fresh generated levels with the trailing slots taken over by the
/// previous iteration's elites (best first). The pool size is always the
/// number of generated levels.
pub fn build_env_pool(
    generated: Vec<LevelMap>,
    elites: &[LevelMap],
    dungeon: &DungeonConfig,
) -> Vec<EnvPoolEntry> {
    let m = generated.len();
    let k = elites.len().min(m);
    let mut levels = generated;
    for (slot, elite) in levels[m - k..].iter_mut().zip(elites) {
        *slot = elite.clone().with_origin(Origin::Elite);
    }
    levels
        .into_iter()
        .map(|l| EnvPoolEntry::new(l, dungeon))
        .collect()
}

/// Where an episode's level comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvRef {
    Pool(usize),
    Curated(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Main,
}

/// Picks the level for the next episode. Pretraining plays curated
/// levels only; the main phase plays the pool, and in semi-supervised
/// mode a curated level with probability `human_rate`.
pub fn select_environment(
    pool_len: usize,
    curated_len: usize,
    rng: &mut impl Rng,
    phase: Phase,
    mode: Mode,
    human_rate: f64,
) -> Option<EnvRef> {
    let curated = |rng: &mut _| (curated_len > 0).then(|| EnvRef::Curated(uniform(rng, curated_len)));
    match phase {
        Phase::Pretrain => curated(rng),
        Phase::Main => {
            if mode == Mode::Semi && curated_len > 0 && rng.random::<f64>() < human_rate {
                return curated(rng);
            }
            (pool_len > 0).then(|| EnvRef::Pool(uniform(rng, pool_len)))
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Indices of the entries whose average reward is closest to zero, best
/// first. Unplayed entries never qualify. Ties go to the entry with more
/// episodes, then to the earlier one.
pub fn rank_and_keep_elites(pool: &[EnvPoolEntry], fraction: f64) -> Vec<usize> {
    let keep = elite_count(fraction, pool.len());
    let mut ranked: Vec<(usize, f64, u32)> = pool
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.average_reward().map(|a| (i, a.abs(), e.episodes)))
        .collect();
    ranked.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then(b.2.cmp(&a.2))
            .then(a.0.cmp(&b.0))
    });
    ranked.into_iter().take(keep).map(|(i, _, _)| i).collect()
}
