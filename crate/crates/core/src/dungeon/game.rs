use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::level::{LevelMap, TileType, NUM_TILES};
use crate::tensor::{Real, Tensor};

pub const NUM_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Use,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::Use];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn facing(self) -> Option<Facing> {
        match self {
            Action::Up => Some(Facing::North),
            Action::Down => Some(Facing::South),
            Action::Left => Some(Facing::West),
            Action::Right => Some(Facing::East),
            Action::Use => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Facing {
    North,
    East,
    South,
    West,
}

impl Facing {
    fn delta(self) -> (isize, isize) {
        match self {
            Facing::North => (-1, 0),
            Facing::East => (0, 1),
            Facing::South => (1, 0),
            Facing::West => (0, -1),
        }
    }
}

/// How terminal and intermediate events are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RewardMode {
    /// +1 win, -1 loss, 0 otherwise.
    #[default]
    Pure,
    /// ±2 on win/loss plus 1/N per score event, N = events available at reset.
    Shaped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ongoing,
    Win,
    Loss,
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EndCause {
    Win,
    Monster,
    Timeout,
    Invalid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DungeonConfig {
    pub step_limit: u32,
    pub reward_mode: RewardMode,
    pub monster_move_prob: f64,
    /// Tile channels in observations; at least the designable alphabet.
    pub channels: usize,
}

impl Default for DungeonConfig {
    fn default() -> Self {
        Self {
            step_limit: 500,
            reward_mode: RewardMode::Pure,
            monster_move_prob: 0.5,
            channels: NUM_TILES,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GameError {
    #[error("episode already ended ({0:?}); reset before stepping")]
    Terminal(Outcome),
}

/// A level checked for playability, ready to be reset into episodes.
#[derive(Clone, Debug)]
pub struct CompiledLevel {
    level: LevelMap,
    valid: bool,
    config: DungeonConfig,
}

/// Validity check: exactly one avatar, at least one key and one door.
/// Invalid levels still compile; their first step is an instant loss.
pub fn compile_level(level: &LevelMap, config: &DungeonConfig) -> CompiledLevel {
    CompiledLevel {
        level: level.clone(),
        valid: level.is_playable_design(),
        config: config.clone(),
    }
}

impl CompiledLevel {
    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn level(&self) -> &LevelMap {
        &self.level
    }

    pub fn config(&self) -> &DungeonConfig {
        &self.config
    }

    pub fn reset(&self, seed: u64) -> GameState {
        GameState::new(self, seed)
    }

    /// Observation at reset, without building a full state.
    pub fn initial_observation<T: Real>(&self) -> Tensor<T> {
        self.reset(0).observe()
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    pub observation: Tensor<T>,
    pub reward: f64,
    pub terminal: bool,
    pub cause: Option<EndCause>,
}

/// Live episode state.
#[derive(Clone, Debug)]
pub struct GameState {
    height: usize,
    width: usize,
    /// Static layer: floor, wall, key and door only.
    terrain: Vec<TileType>,
    valid: bool,
    /// Invalid levels never animate; they are shown exactly as designed.
    static_view: Option<Vec<TileType>>,
    avatar: Option<(usize, usize)>,
    facing: Facing,
    has_key: bool,
    monsters: Vec<(usize, usize)>,
    t: u32,
    step_limit: u32,
    rng: ChaCha8Rng,
    outcome: Outcome,
    cause: Option<EndCause>,
    reward_mode: RewardMode,
    monster_move_prob: f64,
    channels: usize,
    /// Score events available at reset (keys + monsters).
    events_available: usize,
    total_reward: f64,
}

impl GameState {
    fn new(compiled: &CompiledLevel, seed: u64) -> Self {
        let level = &compiled.level;
        let (h, w) = (level.height(), level.width());
        let mut terrain = Vec::with_capacity(h * w);
        let mut avatar = None;
        let mut monsters = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let tile = level.get(r, c);
                match tile {
                    TileType::Avatar => {
                        avatar.get_or_insert((r, c));
                        terrain.push(TileType::Floor);
                    }
                    TileType::Monster => {
                        monsters.push((r, c));
                        terrain.push(TileType::Floor);
                    }
                    other => terrain.push(other),
                }
            }
        }
        let events_available = level.count(TileType::Key) + monsters.len();
        Self {
            height: h,
            width: w,
            terrain,
            valid: compiled.valid,
            static_view: (!compiled.valid).then(|| level.cells().to_vec()),
            avatar,
            facing: Facing::South,
            has_key: false,
            monsters,
            t: 0,
            step_limit: compiled.config.step_limit,
            rng: ChaCha8Rng::seed_from_u64(seed),
            outcome: Outcome::Ongoing,
            cause: None,
            reward_mode: compiled.config.reward_mode,
            monster_move_prob: compiled.config.monster_move_prob,
            channels: compiled.config.channels,
            events_available,
            total_reward: 0.0,
        }
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn cause(&self) -> Option<EndCause> {
        self.cause
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome != Outcome::Ongoing
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    pub fn avatar(&self) -> Option<(usize, usize)> {
        self.avatar
    }

    pub fn facing(&self) -> Facing {
        self.facing
    }

    pub fn monsters(&self) -> &[(usize, usize)] {
        &self.monsters
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step_limit(&self) -> u32 {
        self.step_limit
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn events_available(&self) -> usize {
        self.events_available
    }

    pub fn keys_remaining(&self) -> usize {
        self.terrain.iter().filter(|&&t| t == TileType::Key).count()
    }

    pub fn terrain(&self, row: usize, col: usize) -> TileType {
        self.terrain[row * self.width + col]
    }

    fn neighbour(&self, (r, c): (usize, usize), facing: Facing) -> Option<(usize, usize)> {
        let (dr, dc) = facing.delta();
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < self.height && (nc as usize) < self.width)
            .then_some((nr as usize, nc as usize))
    }

    fn terminal_reward(&self, won: bool) -> f64 {
        let scale = match self.reward_mode {
            RewardMode::Pure => 1.0,
            RewardMode::Shaped => 2.0,
        };
        if won {
            scale
        } else {
            -scale
        }
    }

    fn event_reward(&self) -> f64 {
        match self.reward_mode {
            RewardMode::Pure => 0.0,
            RewardMode::Shaped => 1.0 / self.events_available.max(1) as f64,
        }
    }

    fn finish(&mut self, won: bool, cause: EndCause) -> f64 {
        self.outcome = if won { Outcome::Win } else { Outcome::Loss };
        self.cause = Some(cause);
        self.terminal_reward(won)
    }

    /// Advances one frame: avatar move or sword use, then monsters, then
    /// collision and timeout checks.
    pub fn step<T: Real>(&mut self, action: Action) -> Result<StepOutcome<T>, GameError> {
        if self.is_terminal() {
            return Err(GameError::Terminal(self.outcome));
        }
        let reward = self.advance(action);
        self.total_reward += reward;
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            terminal: self.is_terminal(),
            cause: self.cause,
        })
    }

    fn advance(&mut self, action: Action) -> f64 {
        self.t += 1;
        let avatar = match (self.valid, self.avatar) {
            (true, Some(a)) => a,
            _ => return self.finish(false, EndCause::Invalid),
        };
        let mut reward = 0.0;

        match action.facing() {
            Some(facing) => {
                self.facing = facing;
                if let Some(target) = self.neighbour(avatar, facing) {
                    let idx = target.0 * self.width + target.1;
                    match self.terrain[idx] {
                        TileType::Wall => {}
                        TileType::Door if !self.has_key => {}
                        TileType::Door => {
                            self.avatar = Some(target);
                            return reward + self.finish(true, EndCause::Win);
                        }
                        TileType::Key => {
                            self.avatar = Some(target);
                            self.has_key = true;
                            self.terrain[idx] = TileType::Floor;
                            reward += self.event_reward();
                        }
                        _ => self.avatar = Some(target),
                    }
                }
            }
            None => {
                if let Some(target) = self.neighbour(avatar, self.facing) {
                    if let Some(pos) = self.monsters.iter().position(|&m| m == target) {
                        self.monsters.remove(pos);
                        reward += self.event_reward();
                    }
                }
            }
        }

        self.move_monsters();

        if self.avatar.is_some_and(|a| self.monsters.contains(&a)) {
            return reward + self.finish(false, EndCause::Monster);
        }
        if self.t >= self.step_limit {
            return reward + self.finish(false, EndCause::Timeout);
        }
        reward
    }

    fn move_monsters(&mut self) {
        let dirs = [Facing::North, Facing::East, Facing::South, Facing::West];
        for i in 0..self.monsters.len() {
            if self.rng.random::<f64>() >= self.monster_move_prob {
                continue;
            }
            let here = self.monsters[i];
            let options: Vec<(usize, usize)> = dirs
                .iter()
                .filter_map(|&d| self.neighbour(here, d))
                .filter(|&(r, c)| self.terrain[r * self.width + c] == TileType::Floor)
                .filter(|p| !self.monsters.contains(p))
                .collect();
            if !options.is_empty() {
                self.monsters[i] = options[self.rng.random_range(0..options.len())];
            }
        }
    }

    /// `[channels + 1, H, W]`: one-hot tile planes of the current entity
    /// layout followed by a constant has-key plane.
    pub fn observe<T: Real>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[self.channels + 1, self.height, self.width]);
        let data = t.data_mut();
        for i in 0..plane {
            let pos = (i / self.width, i % self.width);
            let tile = self.tile_at(pos);
            data[tile.channel() * plane + i] = T::one();
        }
        if self.has_key {
            data[self.channels * plane..].iter_mut().for_each(|v| *v = T::one());
        }
        t
    }

    /// Visible tile at a cell: avatar over monsters over terrain.
    pub fn tile_at(&self, pos: (usize, usize)) -> TileType {
        if let Some(view) = &self.static_view {
            view[pos.0 * self.width + pos.1]
        } else if self.avatar == Some(pos) {
            TileType::Avatar
        } else if self.monsters.contains(&pos) {
            TileType::Monster
        } else {
            self.terrain[pos.0 * self.width + pos.1]
        }
    }

    /// Glyph grid with live entities; an avatar holding a key shows as 'K'.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let tile = self.tile_at((r, c));
                if tile == TileType::Avatar && self.has_key && self.avatar == Some((r, c)) {
                    s.push('K');
                } else {
                    s.push(tile.glyph());
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(text: &str) -> LevelMap {
        LevelMap::parse(text).unwrap()
    }

    fn play(text: &str, cfg: &DungeonConfig, actions: &[Action]) -> (GameState, Vec<f64>) {
        let mut s = compile_level(&level(text), cfg).reset(1);
        let rewards = actions
            .iter()
            .map(|&a| s.step::<f32>(a).unwrap().reward)
            .collect();
        (s, rewards)
    }

    #[test]
    fn corridor_win_in_two_steps() {
        let cfg = DungeonConfig::default();
        let (s, r) = play("A+g", &cfg, &[Action::Right, Action::Right]);
        assert_eq!(r, vec![0.0, 1.0]);
        assert_eq!(s.outcome(), Outcome::Win);
        assert_eq!(s.cause(), Some(EndCause::Win));
    }

    #[test]
    fn door_without_key_blocks() {
        let (s, r) = play("Ag+", &DungeonConfig::default(), &[Action::Right]);
        assert_eq!(r, vec![0.0]);
        assert_eq!(s.avatar(), Some((0, 0)));
    }

    #[test]
    fn walking_into_monster_loses() {
        let cfg = DungeonConfig {
            monster_move_prob: 0.0,
            ..Default::default()
        };
        let (s, r) = play("Ae+g", &cfg, &[Action::Right]);
        assert_eq!(r, vec![-1.0]);
        assert_eq!(s.cause(), Some(EndCause::Monster));
    }

    #[test]
    fn missing_key_is_instant_loss() {
        let mut s = compile_level(&level("A.g"), &DungeonConfig::default()).reset(0);
        let out = s.step::<f32>(Action::Up).unwrap();
        assert_eq!((out.reward, out.terminal, out.cause), (-1.0, true, Some(EndCause::Invalid)));
        assert_eq!(s.steps(), 1);
        assert!(s.step::<f32>(Action::Up).is_err());
    }

    #[test]
    fn invalid_level_observed_as_designed() {
        let l = level("AA\n+e");
        let s = compile_level(&l, &DungeonConfig::default()).reset(0);
        let obs = s.observe::<f64>();
        assert_eq!(obs.data()[..l.cells().len() * NUM_TILES], l.one_hot::<f64>(NUM_TILES).data()[..]);
        assert_eq!(s.render(), l.render());
    }

    #[test]
    fn validity_counts_tiles() {
        let cfg = DungeonConfig::default();
        assert!(!compile_level(&level("AA+g"), &cfg).is_valid());
        assert!(!compile_level(&level(".+g"), &cfg).is_valid());
        assert!(!compile_level(&level("A+."), &cfg).is_valid());
        assert!(compile_level(&level("A+gg++e"), &cfg).is_valid());
    }

    #[test]
    fn timeout_is_a_loss() {
        let cfg = DungeonConfig {
            step_limit: 3,
            ..Default::default()
        };
        let (s, r) = play("Aw+g", &cfg, &[Action::Left, Action::Left, Action::Left]);
        assert_eq!(r, vec![0.0, 0.0, -1.0]);
        assert_eq!(s.cause(), Some(EndCause::Timeout));
        assert_eq!(s.steps(), 3);
    }

    #[test]
    fn shaped_key_pickup_pays_one_over_n() {
        let cfg = DungeonConfig {
            reward_mode: RewardMode::Shaped,
            monster_move_prob: 0.0,
            ..Default::default()
        };
        let (s, r) = play("A+g\nwww\n..e", &cfg, &[Action::Right, Action::Right]);
        assert_eq!(s.events_available(), 2);
        assert_eq!(r, vec![0.5, 2.0]);
    }

    #[test]
    fn sword_kills_faced_monster() {
        let cfg = DungeonConfig {
            reward_mode: RewardMode::Shaped,
            monster_move_prob: 0.0,
            ..Default::default()
        };
        let mut s = compile_level(&level("A.\ne+\nwg"), &cfg).reset(3);
        // Facing south at reset; the monster is directly below.
        let out = s.step::<f32>(Action::Use).unwrap();
        assert_eq!(out.reward, 0.5);
        assert!(s.monsters().is_empty());
    }

    #[test]
    fn key_pickup_updates_observation() {
        let mut s = compile_level(&level("A+.g"), &DungeonConfig::default()).reset(0);
        let o0 = s.observe::<f32>();
        let plane = 4;
        assert!(o0.data()[NUM_TILES * plane..].iter().all(|&v| v == 0.0));
        let o1 = s.step::<f32>(Action::Right).unwrap().observation;
        assert_eq!(o1.data()[TileType::Key.channel() * plane + 1], 0.0);
        assert_eq!(o1.data()[TileType::Avatar.channel() * plane + 1], 1.0);
        assert!(o1.data()[NUM_TILES * plane..].iter().all(|&v| v == 1.0));
        assert_eq!(s.render(), ".K.g\n");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let text = "wwwwww\nwA..ew\nw.e..w\nw+..gw\nwwwwww";
        let cfg = DungeonConfig::default();
        let c = compile_level(&level(text), &cfg);
        let actions = [Action::Down, Action::Right, Action::Use, Action::Left, Action::Down];
        let run = |seed| {
            let mut s = c.reset(seed);
            let mut frames = vec![s.render()];
            for &a in &actions {
                if s.is_terminal() {
                    break;
                }
                s.step::<f32>(a).unwrap();
                frames.push(s.render());
            }
            frames
        };
        assert_eq!(run(9), run(9));
    }
}
