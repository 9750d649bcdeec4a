//! Level generator: latent noise to a per-cell tile distribution, with the
//! squared-utility, diversity and reconstruction updates.

mod model;
mod updates;

pub use model::{
    discretize_batch, discretize_level, sample_latents, ChannelMask, GeneratorConfig,
    GeneratorModel,
};
pub use updates::{
    diversity_update, generator_loss, generator_update, pair_distance, random_pairs,
    reconstruction_accuracy, reconstruction_loss, reconstruction_update, relaxation_gap,
    LevelCritic, WallCritic,
};
