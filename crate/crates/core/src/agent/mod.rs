//! Actor-critic agent: a shared encoder feeding a policy head and an
//! action-utility head, trained without discounting.

mod learner;
mod model;

pub use learner::{td_terms, ActorCritic, LearnError, Losses, TdTerms, Transition};
pub use model::{
    act, state_utility, ActMode, ActionDistribution, AgentConfig, AgentModel, EncoderConfig,
    Evaluation, Stepped,
};
