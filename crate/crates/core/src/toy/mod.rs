//! Desk-scale problems and pipeline presets for the bundled toy backend.

mod data;
mod pipeline;

pub use data::{spurious, three_class, NearestCentroid, SpuriousConfig, ToyProblem, COUNTERFACTUAL_GROUPS};
pub use pipeline::{
    identifier_table, personalize, pretrain_denoiser, spurious_experiment, translation_rates, Personalized,
    PretrainConfig, SpuriousOutcome, SpuriousSettings, ToyPipeline,
};
