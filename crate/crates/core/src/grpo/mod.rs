//! Group-relative policy optimization engine.
//!
//! For each step a group of responses is sampled for one question, scored,
//! turned into group-relative advantages and used for one ascent step on the
//! clipped surrogate with a KL penalty toward a frozen reference policy.

mod advantage;
mod surrogate;
mod train;

pub use advantage::{compute_advantages, AdvantageMode};
pub use surrogate::{
    kl_token, surrogate_objective, surrogate_objective_with_fault, Aggregation, GradFault, Group, ObjectiveConfig,
    SurrogateOutput,
};
pub use train::{sample_group, train_loop, train_step, RolloutLog, StepReport, TrainConfig, TrainObserver, TrainState};
