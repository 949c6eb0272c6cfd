//! Encoder-guided diffusion: likelihood score, objective, training and sampling.

pub mod posterior;
pub mod runlog;
pub mod sample;
pub mod train;

pub use posterior::{
    conditional_noise_estimate, guidance_score, guidance_score_graph, kl_graph, kl_to_standard_normal, log_posterior,
    log_posterior_graph, GuidanceMask,
};
pub use runlog::{RunLog, RunRecord, RUNLOG_HEADER};
pub use sample::{
    sample_conditional, sample_guided, CoefficientRule, Condition, ConditionalSamples, GuidanceField, NullGuidance,
    SampleSettings,
};
pub use train::{
    guided_residual, sami_loss, train, train_with_progress, Adam, GuidanceSign, KlAnneal, LossWeight, ModelBundle,
    TrainConfig, TrainMode, TrainOutput,
};
