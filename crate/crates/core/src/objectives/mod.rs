//! Generative models, ELBO estimators and the training loop.

pub mod estimators;
pub mod model;
pub mod train;

pub use estimators::{
    analytic_kl_elbo, anneal_beta, build_objective, draw_noise, elbo_estimate, elbo_estimate_with_noise, elbo_gradient, elbo_samples,
    exact_marginal_linear_gaussian, free_bits_objective, free_bits_penalty, iwae_loglik_estimate, iwae_with_noise,
    kl_annealed_elbo, objective_and_gradient, objective_grad_check, objective_value, score_function_gradient,
    score_function_gradient_with_noise, ElboReport, KlMode, ObjectiveOutput,
};
pub use model::{
    model_sample, AncestralSample, GenerativeModel, HierarchicalLatents, LikelihoodFamily, LikelihoodKind, ModelSpec,
    PosteriorFamily, Prior, PriorFamily, Vae,
};
pub use train::{holdout_elbo, train_aevb, MetricsRow, Snapshot, TrainConfig, TrainError, TrainOutcome, TrainState};
