use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError, Entry};
use super::config::{ConfigError, Mode, TrainConfig};
use super::metrics::{log_metrics, read_metrics, MetricsRow, METRICS_HEADER};
use super::pool::{build_env_pool, rank_and_keep_elites, select_environment, EnvPoolEntry, EnvRef, Phase};
use super::rollout::{run_agent_phase, stream_rng, EnvSet, PhaseStats, Reconstruction, RolloutWorker};
use crate::agent::{ActorCritic, AgentModel, LearnError};
use crate::dungeon::{compile_level, curated_levels, CompiledLevel, DungeonConfig, LevelError, LevelMap, Origin};
use crate::generator::{
    diversity_update, discretize_batch, generator_update, sample_latents, GeneratorModel,
};
use crate::tensor::{AdamState, ParamStore, Tensor, TensorError};

const STREAM_INIT: u64 = 0;
const STREAM_POOL: u64 = 1;
const STREAM_GENERATOR: u64 = 2;
const STREAM_RECON: u64 = 3;
const STREAM_WORKERS: u64 = 1 << 32;
/// Iteration key reserved for pretraining streams.
const PRETRAIN_ITERATION: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Level(#[from] LevelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Curated levels from `dir` (every `.lvl` file, by name), or the bundled
/// set when `dir` is `None`.
pub fn load_curated(dir: Option<&Path>) -> Result<Vec<LevelMap>, TrainError> {
    let Some(dir) = dir else {
        return Ok(curated_levels());
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lvl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(LevelMap::load(p)?.with_origin(Origin::Curated)))
        .collect()
}

/// Runs the agent loop on curated levels only, with reconstruction
/// updates when `recon` is given. `steps = 0` leaves everything untouched.
pub fn pretrain_agent(
    learner: &mut ActorCritic<f32>,
    recon: Option<Reconstruction<'_, f32>>,
    curated: &[CompiledLevel],
    steps: u64,
    config: &TrainConfig,
) -> Result<PhaseStats, TrainError> {
    if steps == 0 || curated.is_empty() {
        return Ok(PhaseStats::default());
    }
    let mut workers = workers_for(config, PRETRAIN_ITERATION);
    let envs = EnvSet { pool: &[], curated };
    let n = curated.len();
    let select = |rng: &mut _| select_environment(0, n, rng, Phase::Pretrain, config.mode, config.human_rate);
    Ok(run_agent_phase(learner, recon, &mut workers, envs, steps, config.n_step, select)?)
}

fn workers_for(config: &TrainConfig, iteration: u64) -> Vec<RolloutWorker<f32>> {
    (0..config.workers as u64)
        .map(|w| RolloutWorker::new(stream_rng(config.seed, iteration, STREAM_WORKERS + w)))
        .collect()
}

/// What one outer iteration produced.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub metrics: MetricsRow,
    pub pool: Vec<EnvPoolEntry>,
    pub stats: PhaseStats,
}

/// Everything that persists between outer iterations.
pub struct Trainer {
    pub config: TrainConfig,
    pub learner: ActorCritic<f32>,
    pub generator: GeneratorModel<f32>,
    pub gen_opt: AdamState<f32>,
    pub div_opt: AdamState<f32>,
    pub recon_gen_opt: AdamState<f32>,
    pub recon_enc_opt: AdamState<f32>,
    /// Best levels of the previous iteration, best first.
    pub elites: Vec<LevelMap>,
    pub iteration: u64,
    pub frames: u64,
    pub pretrained: bool,
    curated: Vec<CompiledLevel>,
    dungeon: DungeonConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let dungeon = config.dungeon();
        let gcfg = config.generator();
        let (h, w) = (gcfg.output_height(), gcfg.output_width());
        let curated: Vec<CompiledLevel> = match config.mode {
            Mode::Unsupervised => Vec::new(),
            Mode::Semi => load_curated(config.curated.as_deref())?
                .iter()
                .map(|l| compile_level(l, &dungeon))
                .collect(),
        };
        if config.mode == Mode::Semi && curated.is_empty() {
            return Err(TrainError::Invalid("semi-supervised mode needs at least one curated level".into()));
        }
        if let Some(c) = curated.iter().find(|c| (c.level().height(), c.level().width()) != (h, w)) {
            return Err(TrainError::Invalid(format!(
                "curated level is {}x{}, generated levels are {h}x{w}",
                c.level().height(),
                c.level().width()
            )));
        }
        let mut rng = stream_rng(config.seed, 0, STREAM_INIT);
        let agent = AgentModel::new(config.agent(), config.channels + 1, h, w, &mut rng);
        let generator = GeneratorModel::new(gcfg, &mut rng);
        let learner = ActorCritic::new(agent, config.lr_policy, config.lr_value, config.entropy_coef);
        let gen_ids = generator.ids();
        let enc_ids = learner.model.encoder_ids();
        Ok(Self {
            gen_opt: AdamState::new(&generator.store, gen_ids.clone(), config.lr_generator),
            div_opt: AdamState::new(&generator.store, gen_ids.clone(), config.lr_generator),
            recon_gen_opt: AdamState::new(&generator.store, gen_ids, config.lr_recon),
            recon_enc_opt: AdamState::new(&learner.model.store, enc_ids, config.lr_recon),
            learner,
            generator,
            elites: Vec::new(),
            iteration: 0,
            frames: 0,
            pretrained: false,
            curated,
            dungeon,
            config,
        })
    }

    pub fn curated(&self) -> &[CompiledLevel] {
        &self.curated
    }

    /// Pretraining on curated levels; a no-op in unsupervised mode or when
    /// it already ran.
    pub fn pretrain(&mut self) -> Result<PhaseStats, TrainError> {
        if self.pretrained || self.config.mode == Mode::Unsupervised {
            self.pretrained = true;
            return Ok(PhaseStats::default());
        }
        let curated = std::mem::take(&mut self.curated);
        let config = self.config.clone();
        let recon = Some(Reconstruction {
            generator: &mut self.generator,
            gen_opt: &mut self.recon_gen_opt,
            enc_opt: &mut self.recon_enc_opt,
            rng: stream_rng(config.seed, PRETRAIN_ITERATION, STREAM_RECON),
        });
        let out = pretrain_agent(&mut self.learner, recon, &curated, config.pretrain_steps, &config);
        self.curated = curated;
        self.pretrained = true;
        out
    }

    /// `m` levels from fresh latents, generated without dropout.
    pub fn generate_levels(&self, m: usize, rng: &mut impl rand::Rng) -> Result<(Vec<LevelMap>, Tensor<f32>), TrainError> {
        let z = sample_latents(m, self.generator.config().latent_dim, rng);
        let probs = self.generator.generate(&z, false, rng)?;
        Ok((discretize_batch(&probs), probs))
    }

    /// One outer iteration: pool, agent phase, generator and diversity
    /// updates, elite selection.
    pub fn iteration(&mut self) -> Result<IterationReport, TrainError> {
        let start = Instant::now();
        let it = self.iteration;
        let cfg = self.config.clone();
        let m = cfg.batch_size;

        let mut pool_rng = stream_rng(cfg.seed, it, STREAM_POOL);
        let (generated, _) = self.generate_levels(m, &mut pool_rng)?;
        let failures = generated.iter().filter(|l| !l.is_playable_design()).count();
        let failure_rate = failures as f64 / m as f64;
        let mut pool = build_env_pool(generated, &self.elites, &self.dungeon);

        let mut workers = workers_for(&cfg, it);
        let curated = std::mem::take(&mut self.curated);
        let select = |rng: &mut _| {
            select_environment(m, curated.len(), rng, Phase::Main, cfg.mode, cfg.human_rate)
        };
        let recon = (cfg.mode == Mode::Semi).then(|| Reconstruction {
            generator: &mut self.generator,
            gen_opt: &mut self.recon_gen_opt,
            enc_opt: &mut self.recon_enc_opt,
            rng: stream_rng(cfg.seed, it, STREAM_RECON),
        });
        let envs = EnvSet {
            pool: &pool,
            curated: &curated,
        };
        let phase = run_agent_phase(
            &mut self.learner,
            recon,
            &mut workers,
            envs,
            cfg.steps_per_iteration,
            cfg.n_step,
            select,
        );
        self.curated = curated;
        let stats = phase?;
        self.frames += stats.frames;
        for ep in &stats.episodes {
            if let EnvRef::Pool(i) = ep.source {
                pool[i].record(ep.reward);
            }
        }

        let obs: Vec<Tensor<f32>> = pool.iter().map(|e| e.compiled.initial_observation()).collect();
        let refs: Vec<&Tensor<f32>> = obs.iter().collect();
        let u0: Vec<f64> = self.learner.model.evaluate(&refs)?.iter().map(|e| e.utility).collect();
        let mean_u0 = u0.iter().sum::<f64>() / u0.len() as f64;
        let played: Vec<(f64, f64)> = pool
            .iter()
            .zip(&u0)
            .filter_map(|(e, &u)| e.average_reward().map(|r| (r, u)))
            .collect();
        let (mean_real_reward, value_gap) = if played.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let k = played.len() as f64;
            let r = played.iter().map(|p| p.0).sum::<f64>() / k;
            let u = played.iter().map(|p| p.1).sum::<f64>() / k;
            (r, (u - r).abs())
        };

        let mut grng = stream_rng(cfg.seed, it, STREAM_GENERATOR);
        let mut generator_loss = 0.0;
        for _ in 0..cfg.generator_updates {
            generator_loss += generator_update(&mut self.generator, &mut self.gen_opt, &self.learner.model, m, &mut grng)?;
        }
        let mut diversity = 0.0;
        for _ in 0..cfg.diversity_updates {
            diversity += diversity_update(&mut self.generator, &mut self.div_opt, &self.learner.model, m, &mut grng)?;
        }

        self.elites = rank_and_keep_elites(&pool, cfg.elite_fraction)
            .into_iter()
            .map(|i| pool[i].level().clone().with_origin(Origin::Elite))
            .collect();
        self.iteration += 1;

        let metrics = MetricsRow {
            iteration: it,
            frames: self.frames,
            mean_real_reward,
            mean_u0,
            value_gap,
            failure_rate,
            diversity: diversity / cfg.diversity_updates.max(1) as f64,
            value_loss: stats.mean_value_loss(),
            policy_loss: stats.mean_policy_loss(),
            generator_loss: generator_loss / cfg.generator_updates.max(1) as f64,
            reconstruction_loss: stats.mean_recon_loss(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        Ok(IterationReport { metrics, pool, stats })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("config", Entry::Text(self.config.to_text()));
        ck.insert("iteration", Entry::Counter(self.iteration));
        ck.insert("frames", Entry::Counter(self.frames));
        ck.insert("pretrained", Entry::Counter(self.pretrained as u64));
        let elites: Vec<String> = self.elites.iter().map(|l| l.render()).collect();
        ck.insert("elites", Entry::Text(elites.join("\n")));
        put_store(&mut ck, &self.learner.model.store);
        put_store(&mut ck, &self.generator.store);
        put_adam(&mut ck, "value", &self.learner.value_opt, &self.learner.model.store);
        put_adam(&mut ck, "policy", &self.learner.policy_opt, &self.learner.model.store);
        put_adam(&mut ck, "recon_enc", &self.recon_enc_opt, &self.learner.model.store);
        put_adam(&mut ck, "gen", &self.gen_opt, &self.generator.store);
        put_adam(&mut ck, "div", &self.div_opt, &self.generator.store);
        put_adam(&mut ck, "recon_gen", &self.recon_gen_opt, &self.generator.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let config = TrainConfig::parse(ck.text("config")?)?;
        let mut t = Self::new(config)?;
        t.iteration = ck.counter("iteration")?;
        t.frames = ck.counter("frames")?;
        t.pretrained = ck.counter("pretrained")? != 0;
        t.elites = ck
            .text("elites")?
            .split("\n\n")
            .filter(|s| !s.trim().is_empty())
            .map(|s| Ok(LevelMap::parse(s)?.with_origin(Origin::Elite)))
            .collect::<Result<_, TrainError>>()?;
        get_store(ck, &mut t.learner.model.store)?;
        get_store(ck, &mut t.generator.store)?;
        get_adam(ck, "value", &mut t.learner.value_opt, &t.learner.model.store)?;
        get_adam(ck, "policy", &mut t.learner.policy_opt, &t.learner.model.store)?;
        get_adam(ck, "recon_enc", &mut t.recon_enc_opt, &t.learner.model.store)?;
        get_adam(ck, "gen", &mut t.gen_opt, &t.generator.store)?;
        get_adam(ck, "div", &mut t.div_opt, &t.generator.store)?;
        get_adam(ck, "recon_gen", &mut t.recon_gen_opt, &t.generator.store)?;
        Ok(t)
    }
}

fn put_store(ck: &mut Checkpoint, store: &ParamStore<f32>) {
    for (id, name) in store.names().iter().enumerate() {
        let v = store.value(id);
        ck.insert(
            name.clone(),
            Entry::Array {
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            },
        );
    }
}

fn get_store(ck: &Checkpoint, store: &mut ParamStore<f32>) -> Result<(), TrainError> {
    for id in 0..store.len() {
        let name = store.name(id).to_string();
        let (shape, data) = ck.array(&name)?;
        let t = Tensor::new(shape.to_vec(), data.to_vec())?;
        store
            .set(id, t)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
    }
    Ok(())
}

fn put_adam(ck: &mut Checkpoint, key: &str, opt: &AdamState<f32>, store: &ParamStore<f32>) {
    ck.insert(format!("adam/{key}/t"), Entry::Counter(opt.t));
    for (slot, &id) in opt.params().iter().enumerate() {
        let (m1, m2) = opt.moments(slot);
        let base = format!("adam/{key}/{}", store.name(id));
        let shape = vec![m1.len()];
        ck.insert(
            format!("{base}/m1"),
            Entry::Array {
                shape: shape.clone(),
                data: m1.to_vec(),
            },
        );
        ck.insert(
            format!("{base}/m2"),
            Entry::Array {
                shape,
                data: m2.to_vec(),
            },
        );
    }
}

fn get_adam(ck: &Checkpoint, key: &str, opt: &mut AdamState<f32>, store: &ParamStore<f32>) -> Result<(), TrainError> {
    opt.t = ck.counter(&format!("adam/{key}/t"))?;
    for slot in 0..opt.params().len() {
        let base = format!("adam/{key}/{}", store.name(opt.params()[slot]));
        let m1 = ck.array(&format!("{base}/m1"))?.1.to_vec();
        let m2 = ck.array(&format!("{base}/m2"))?.1.to_vec();
        if !opt.set_moments(slot, m1, m2) {
            return Err(CheckpointError::Malformed(format!("{base}: moment size mismatch")).into());
        }
    }
    Ok(())
}

/// Where a run writes and how it may be stopped.
#[derive(Debug)]
pub struct RunOptions<'a> {
    pub out_dir: PathBuf,
    /// Continue from `out_dir/checkpoint.gpnf` when present.
    pub resume: bool,
    /// Set from outside (e.g. on interrupt); checked between iterations.
    pub stop: Option<&'a AtomicBool>,
    /// Stop after this many iterations of this invocation.
    pub max_iterations: Option<u64>,
}

impl RunOptions<'_> {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: false,
            stop: None,
            max_iterations: None,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.gpnf";
pub const METRICS_FILE: &str = "metrics.csv";
/// Creating this file in the output directory ends the run after the
/// current iteration.
pub const STOP_FILE: &str = "STOP";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub iterations: u64,
    pub frames: u64,
    pub stopped_early: bool,
}

/// The full loop: pool, agent phase, generator phase, elites, metrics and
/// checkpoint per iteration, until the frame budget is spent or a stop is
/// requested. On resume the checkpoint's settings win except for the
/// frame budget.
pub fn run_training(config: TrainConfig, opts: RunOptions<'_>) -> Result<RunSummary, TrainError> {
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let stop_path = out.join(STOP_FILE);

    let mut trainer = if opts.resume && ck_path.exists() {
        let mut t = Trainer::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
        t.config.frames = config.frames;
        let kept: Vec<MetricsRow> = if metrics_path.exists() {
            read_metrics(&metrics_path)
                .map_err(io_err(&metrics_path))?
                .into_iter()
                .filter(|r| r.iteration < t.iteration)
                .collect()
        } else {
            Vec::new()
        };
        let mut text = format!("{METRICS_HEADER}\n");
        for r in &kept {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        std::fs::write(&metrics_path, text).map_err(io_err(&metrics_path))?;
        log::info!("resuming at iteration {} ({} frames)", t.iteration, t.frames);
        t
    } else {
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path).map_err(io_err(&metrics_path))?;
        }
        Trainer::new(config)?
    };
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, trainer.config.to_text()).map_err(io_err(&cfg_path))?;

    if !trainer.pretrained {
        let s = trainer.pretrain()?;
        if s.frames > 0 {
            log::info!("pretrained on {} frames", s.frames);
        }
    }
    trainer.to_checkpoint().save(&ck_path)?;

    let mut rows = Vec::new();
    let mut stopped_early = false;
    let mut done = 0;
    while trainer.frames < trainer.config.frames {
        if opts.stop.is_some_and(|s| s.load(Ordering::SeqCst)) || stop_path.exists() {
            stopped_early = true;
            break;
        }
        if opts.max_iterations.is_some_and(|n| done >= n) {
            break;
        }
        let report = trainer.iteration()?;
        let row = report.metrics;
        log_metrics(&metrics_path, &row).map_err(io_err(&metrics_path))?;
        write_samples(out, row.iteration, &report.pool, trainer.config.samples_per_iteration)?;
        trainer.to_checkpoint().save(&ck_path)?;
        log::info!(
            "iteration {} frames {} failure {:.3} reward {:.3} u0 {:.3}",
            row.iteration,
            row.frames,
            row.failure_rate,
            row.mean_real_reward,
            row.mean_u0
        );
        rows.push(row);
        done += 1;
    }
    if stop_path.exists() {
        let _ = std::fs::remove_file(&stop_path);
    }
    Ok(RunSummary {
        rows,
        iterations: trainer.iteration,
        frames: trainer.frames,
        stopped_early,
    })
}

fn write_samples(out: &Path, iteration: u64, pool: &[EnvPoolEntry], count: usize) -> Result<(), TrainError> {
    if count == 0 {
        return Ok(());
    }
    let dir = out.join("levels").join(format!("iter_{iteration:04}"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, e) in pool
        .iter()
        .filter(|e| e.origin() == Origin::Generated)
        .take(count)
        .enumerate()
    {
        let p = dir.join(format!("sample_{i:02}.lvl"));
        std::fs::write(&p, e.level().render()).map_err(io_err(&p))?;
    }
    Ok(())
}
