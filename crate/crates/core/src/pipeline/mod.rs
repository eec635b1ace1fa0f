//! Configuration, training loop, inference, and experiment runs.

mod config;
mod experiment;
mod infer;
mod state;
mod train;

pub use config::{RunConfig, TrainConfig, Variant};
pub use experiment::{
    fit, loss_csv, model_config, run_experiment, split_sources, write_artifacts, DomainSampler,
    ExperimentOutcome, FitOutcome, RunReport, SelectionPoint, Split,
};
pub use infer::{
    accuracy, argmax_rows, infer, infer_plain, infer_prompt_averaged, infer_with_domain_prompt,
    predict, Adapted, EVAL_CHUNK,
};
pub use state::ModelState;
pub use train::{apply_variant, objective_for, optimizer, train_step};
