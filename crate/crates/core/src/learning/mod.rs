//! Variational EM: expected counts, M-steps, and the batch and online loops.

mod mstep;
mod stats;
mod train;

pub use mstep::{
    expected_prior_log_likelihood, mstep_initial_transition, mstep_observation, observation_objective_and_gradient,
    ObservationMstepOptions, ObservationMstepReport, ObservationObjective, COUNT_SMOOTHING,
};
pub use stats::SufficientStats;
pub use train::{
    estep, mean_token_bound, stepwise_rate, train_full_batch, train_full_batch_from, train_online, train_online_from,
    EstepOutput, Progress, ProgressRecord, TrainConfig,
};
