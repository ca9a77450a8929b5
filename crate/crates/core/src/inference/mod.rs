//! Posterior inference: exact single-chain routines and the structured
//! variational approximation built on them.

mod chain;
mod variational;

pub use chain::{forward_backward_layer, viterbi_layer, ChainPosterior};
pub use variational::{
    compute_phi_aux, fit_variational, kl_surrogate, uniform_marginals, update_obs_potentials, viterbi_decode, Observer,
    PosteriorMarginals, VariationalInference, VariationalOptions, VariationalState, WarmStart, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};

pub(crate) use variational::{factor_total, layer_factors, leave_one_out};

#[cfg(test)]
mod tests;
