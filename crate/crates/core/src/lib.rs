//! Generative playing networks.
//!
//! An actor-critic agent learns to play a small dungeon game while a
//! convolutional generator learns, through the agent's own utility
//! estimate, to produce levels the agent expects to finish with zero
//! total reward: neither trivially won nor hopeless.

pub mod par;
pub mod tensor;
pub mod dungeon;
pub mod agent;
pub mod generator;
pub mod trainer;
