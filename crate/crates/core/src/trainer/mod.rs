//! The outer loop: pools of generated levels, the agent phase, generator
//! and diversity updates, elitism, metrics and checkpoints.

mod checkpoint;
mod config;
mod evaluate;
mod metrics;
mod pool;
mod rollout;
mod run;

pub use checkpoint::{Checkpoint, CheckpointError, Entry};
pub use config::{elite_count, ConfigError, Mode, TrainConfig};
pub use evaluate::{evaluate_level, play_episode, LevelReport};
pub use metrics::{log_metrics, read_metrics, MetricsRow, METRICS_HEADER};
pub use pool::{build_env_pool, rank_and_keep_elites, select_environment, EnvPoolEntry, EnvRef, Phase};
pub use rollout::{
    run_agent_phase, stream_rng, EnvSet, EpisodeRecord, PhaseStats, Reconstruction, RolloutWorker, Segment,
};
pub use run::{
    load_curated, pretrain_agent, run_training, IterationReport, RunOptions, RunSummary, TrainError, Trainer,
    CHECKPOINT_FILE, METRICS_FILE, STOP_FILE,
};
