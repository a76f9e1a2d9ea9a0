//! Optimizers and the training regimes built on the adjoint gradients:
//! regression on time series, classification through a linear readout,
//! parameter identification and model-free delay inference.
pub mod classifier;
pub mod config;
pub mod engine;
pub mod identify;
pub mod optim;
pub mod record;
pub mod regression;
pub mod supervised;

#[cfg(test)]
mod tests;

pub use classifier::{concentric_dataset, sample_shell, train_classifier, ClassifierProblem, LabeledPoint};
pub use config::{TrainConfig, Trainable};
pub use engine::{evaluate_loss, train, ItemEval, Objective};
pub use identify::{identify_parameters, infer_delay_model_free, IdentificationTarget};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState, Optimizer};
pub use record::{EpochRecord, TrainEvent, TrainRecord, TrainStatus};
pub use regression::{train_regression, windows, RegressionProblem, Series, Tracked, TrackedSource};
pub use supervised::{fit_mlp, MlpFit};
