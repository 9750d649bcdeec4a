//! Zelda-like dungeon crawler: grab a key, reach a door, avoid or slay
//! the monsters. Only winning is ever rewarded positively.

mod game;
mod level;

pub use game::{
    compile_level, Action, CompiledLevel, DungeonConfig, EndCause, Facing, GameError, GameState,
    Outcome, RewardMode, StepOutcome, NUM_ACTIONS,
};
pub use level::{LevelError, LevelMap, Origin, TileType, NUM_TILES};

const CURATED: [&str; 5] = [
    include_str!("../../fixtures/curated/zelda_0.lvl"),
    include_str!("../../fixtures/curated/zelda_1.lvl"),
    include_str!("../../fixtures/curated/zelda_2.lvl"),
    include_str!("../../fixtures/curated/zelda_3.lvl"),
    include_str!("../../fixtures/curated/zelda_4.lvl"),
];

/// The five hand-designed 12×16 levels shipped with the crate.
pub fn curated_levels() -> Vec<LevelMap> {
    CURATED
        .iter()
        .map(|t| {
            LevelMap::parse(t)
                .expect("bundled fixture parses")
                .with_origin(Origin::Curated)
        })
        .collect()
}

/// Text of the state or level with entity overlay.
pub fn render_ascii(state: &GameState) -> String {
    state.render()
}
