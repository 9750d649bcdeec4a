use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::agent::{AgentConfig, EncoderConfig};
use crate::dungeon::{DungeonConfig, RewardMode, TileType, NUM_TILES};
use crate::generator::{ChannelMask, GeneratorConfig};
use crate::tensor::UpsampleMode;

/// Unsupervised runs use generated levels only; semi-supervised runs
/// also pretrain on, sample from and reconstruct curated levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Unsupervised,
    Semi,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unsupervised => "unsupervised",
            Mode::Semi => "semi",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unsupervised" => Ok(Mode::Unsupervised),
            "semi" | "semi-supervised" => Ok(Mode::Semi),
            _ => Err(format!("unknown mode {s:?} (expected unsupervised or semi)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown config key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: bad value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Every tunable of a training run. There is deliberately no discount
/// factor: returns are undiscounted.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    /// Stop once this many environment frames have been played.
    pub frames: u64,
    /// Environment steps in the agent phase of each outer iteration.
    pub steps_per_iteration: u64,
    pub pretrain_steps: u64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub lr_recon: f64,
    pub lr_generator: f64,
    /// Latent batch size `m`, also the pool size.
    pub batch_size: usize,
    pub generator_updates: usize,
    pub diversity_updates: usize,
    pub elite_fraction: f64,
    /// Probability of playing a curated level in the main phase of a
    /// semi-supervised run.
    pub human_rate: f64,
    /// Steps per worker between agent updates.
    pub n_step: usize,
    pub entropy_coef: f64,
    pub step_limit: u32,
    pub reward_mode: RewardMode,
    pub monster_move_prob: f64,
    pub channels: usize,
    pub latent_dim: usize,
    pub gen_filters: usize,
    pub gen_dropout: f64,
    pub upsample: UpsampleMode,
    /// Tiles the generator may place, as glyphs in the config text.
    pub gen_tiles: Vec<TileType>,
    pub enc_channels: usize,
    pub enc_layers: usize,
    pub enc_res_blocks: usize,
    pub encoding_dim: usize,
    /// GRU cell on top of the encoder.
    pub recurrent: bool,
    /// Generated levels written to disk per iteration.
    pub samples_per_iteration: usize,
    /// Directory of curated `.lvl` files; the bundled set when unset.
    pub curated: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unsupervised,
            seed: 0,
            workers: 16,
            frames: 200_000,
            steps_per_iteration: 20_000,
            pretrain_steps: 50_000,
            lr_policy: 2.5e-4,
            lr_value: 2.5e-5,
            lr_recon: 5e-5,
            lr_generator: 1e-4,
            batch_size: 128,
            generator_updates: 10,
            diversity_updates: 90,
            elite_fraction: 0.3,
            human_rate: 0.5,
            n_step: 5,
            entropy_coef: 0.01,
            step_limit: 500,
            reward_mode: RewardMode::Pure,
            monster_move_prob: 0.5,
            channels: NUM_TILES,
            latent_dim: 64,
            gen_filters: 64,
            gen_dropout: 0.2,
            upsample: UpsampleMode::Nearest,
            gen_tiles: TileType::ALL.to_vec(),
            enc_channels: 8,
            enc_layers: 2,
            enc_res_blocks: 0,
            encoding_dim: 64,
            recurrent: false,
            samples_per_iteration: 9,
            curated: None,
        }
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl TrainConfig {
    /// Full-size run: 512-wide generator and encoder, residual encoder,
    /// GRU cell, 1M steps per iteration, 20M pretraining steps, 50M frames.
    pub fn paper_scale() -> Self {
        let g = GeneratorConfig::paper_scale();
        let e = EncoderConfig::paper_scale();
        Self {
            frames: 50_000_000,
            steps_per_iteration: 1_000_000,
            pretrain_steps: 20_000_000,
            channels: g.channels(),
            latent_dim: g.latent_dim,
            gen_filters: g.filters,
            upsample: g.upsample,
            enc_channels: e.conv_channels,
            enc_layers: e.conv_layers,
            enc_res_blocks: e.res_blocks,
            encoding_dim: e.encoding_dim,
            recurrent: e.recurrent,
            ..Self::default()
        }
    }

    /// Number of elites carried into a pool of `m` levels.
    pub fn elite_count(&self) -> usize {
        elite_count(self.elite_fraction, self.batch_size)
    }

    pub fn dungeon(&self) -> DungeonConfig {
        DungeonConfig {
            step_limit: self.step_limit,
            reward_mode: self.reward_mode,
            monster_move_prob: self.monster_move_prob,
            channels: self.channels,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            encoder: EncoderConfig {
                conv_channels: self.enc_channels,
                conv_layers: self.enc_layers,
                res_blocks: self.enc_res_blocks,
                kernel: 3,
                encoding_dim: self.encoding_dim,
                recurrent: self.recurrent,
            },
            ..AgentConfig::default()
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            filters: self.gen_filters,
            dropout: self.gen_dropout,
            upsample: self.upsample,
            encoding_dim: self.encoding_dim,
            mask: ChannelMask::only(self.channels, &self.gen_tiles).expect("validated tile set"),
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let rates = [
            ("lr_policy", self.lr_policy),
            ("lr_value", self.lr_value),
            ("lr_recon", self.lr_recon),
            ("lr_generator", self.lr_generator),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return bad(&format!("{name} must be positive, got {r}"));
            }
        }
        if !(0.0..1.0).contains(&self.elite_fraction) {
            return bad("elite_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.human_rate) {
            return bad("human_rate must lie in [0, 1]");
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size must be even and at least 2");
        }
        if self.workers == 0 || self.n_step == 0 || self.steps_per_iteration == 0 {
            return bad("workers, n_step and steps_per_iteration must be positive");
        }
        if self.channels < NUM_TILES {
            return bad("channels must cover the six tile types");
        }
        if !(0.0..1.0).contains(&self.gen_dropout) {
            return bad("gen_dropout must lie in [0, 1)");
        }
        if self.gen_filters == 0 || self.latent_dim == 0 || self.encoding_dim == 0 {
            return bad("gen_filters, latent_dim and encoding_dim must be positive");
        }
        if self.gen_tiles.is_empty() {
            return bad("gen_tiles must allow at least one tile");
        }
        if self.step_limit == 0 {
            return bad("step_limit must be positive");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            message,
        };
        match key {
            "mode" => self.mode = v.parse().map_err(bad)?,
            "seed" => self.seed = parse_num(line, key, v)?,
            "workers" => self.workers = parse_num(line, key, v)?,
            "frames" => self.frames = parse_num(line, key, v)?,
            "steps_per_iteration" => self.steps_per_iteration = parse_num(line, key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(line, key, v)?,
            "lr_policy" => self.lr_policy = parse_num(line, key, v)?,
            "lr_value" => self.lr_value = parse_num(line, key, v)?,
            "lr_recon" => self.lr_recon = parse_num(line, key, v)?,
            "lr_generator" => self.lr_generator = parse_num(line, key, v)?,
            "batch_size" => self.batch_size = parse_num(line, key, v)?,
            "generator_updates" => self.generator_updates = parse_num(line, key, v)?,
            "diversity_updates" => self.diversity_updates = parse_num(line, key, v)?,
            "elite_fraction" => self.elite_fraction = parse_num(line, key, v)?,
            "human_rate" => self.human_rate = parse_num(line, key, v)?,
            "n_step" => self.n_step = parse_num(line, key, v)?,
            "entropy_coef" => self.entropy_coef = parse_num(line, key, v)?,
            "step_limit" => self.step_limit = parse_num(line, key, v)?,
            "reward_mode" => {
                self.reward_mode = match v {
                    "pure" => RewardMode::Pure,
                    "shaped" => RewardMode::Shaped,
                    _ => return Err(bad(format!("{v:?} is not pure or shaped"))),
                }
            }
            "monster_move_prob" => self.monster_move_prob = parse_num(line, key, v)?,
            "channels" => self.channels = parse_num(line, key, v)?,
            "latent_dim" => self.latent_dim = parse_num(line, key, v)?,
            "gen_filters" => self.gen_filters = parse_num(line, key, v)?,
            "gen_dropout" => self.gen_dropout = parse_num(line, key, v)?,
            "upsample" => {
                self.upsample = match v {
                    "nearest" => UpsampleMode::Nearest,
                    "subpixel" => UpsampleMode::SubPixel,
                    _ => return Err(bad(format!("{v:?} is not nearest or subpixel"))),
                }
            }
            "gen_tiles" => {
                let mut tiles = Vec::new();
                for c in v.chars() {
                    let t = TileType::from_glyph(c).ok_or_else(|| bad(format!("unknown tile glyph {c:?}")))?;
                    if !tiles.contains(&t) {
                        tiles.push(t);
                    }
                }
                self.gen_tiles = tiles;
            }
            "enc_channels" => self.enc_channels = parse_num(line, key, v)?,
            "enc_layers" => self.enc_layers = parse_num(line, key, v)?,
            "enc_res_blocks" => self.enc_res_blocks = parse_num(line, key, v)?,
            "encoding_dim" => self.encoding_dim = parse_num(line, key, v)?,
            "recurrent" => self.recurrent = parse_num(line, key, v)?,
            "samples_per_iteration" => self.samples_per_iteration = parse_num(line, key, v)?,
            "curated" => self.curated = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` text on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::default().parse_over(text)
    }

    /// Like [`TrainConfig::parse`] with `self` as the base.
    pub fn parse_over(self, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = self;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set_at(i + 1, k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::default().load_over(path)
    }

    pub fn load_over(self, path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.parse_over(&text)
    }

    /// Text form accepted by [`TrainConfig::parse`]; floats print in their
    /// shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.as_str().into());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("frames", self.frames.to_string());
        kv("steps_per_iteration", self.steps_per_iteration.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("lr_policy", self.lr_policy.to_string());
        kv("lr_value", self.lr_value.to_string());
        kv("lr_recon", self.lr_recon.to_string());
        kv("lr_generator", self.lr_generator.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("generator_updates", self.generator_updates.to_string());
        kv("diversity_updates", self.diversity_updates.to_string());
        kv("elite_fraction", self.elite_fraction.to_string());
        kv("human_rate", self.human_rate.to_string());
        kv("n_step", self.n_step.to_string());
        kv("entropy_coef", self.entropy_coef.to_string());
        kv("step_limit", self.step_limit.to_string());
        kv(
            "reward_mode",
            match self.reward_mode {
                RewardMode::Pure => "pure",
                RewardMode::Shaped => "shaped",
            }
            .into(),
        );
        kv("monster_move_prob", self.monster_move_prob.to_string());
        kv("channels", self.channels.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("gen_filters", self.gen_filters.to_string());
        kv("gen_dropout", self.gen_dropout.to_string());
        kv(
            "upsample",
            match self.upsample {
                UpsampleMode::Nearest => "nearest",
                UpsampleMode::SubPixel => "subpixel",
            }
            .into(),
        );
        kv("gen_tiles", self.gen_tiles.iter().map(|t| t.glyph()).collect());
        kv("enc_channels", self.enc_channels.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("enc_res_blocks", self.enc_res_blocks.to_string());
        kv("encoding_dim", self.encoding_dim.to_string());
        kv("recurrent", self.recurrent.to_string());
        kv("samples_per_iteration", self.samples_per_iteration.to_string());
        if let Some(p) = &self.curated {
            kv("curated", p.display().to_string());
        }
        s
    }
}

/// `⌈fraction · m⌉`, robust to `0.3 · 10` landing a hair above 3.
pub fn elite_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64) - 1e-9).ceil().max(0.0) as usize
}
