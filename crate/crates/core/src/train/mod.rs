//! Initialisation, optimisation, class weighting, cross-validation splits
//! and the two-stage training drivers.

mod checkpoint;
mod driver;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelConfig, META_TENSOR};
#[cfg(test)]
pub(crate) use driver::{fit_cnn, fit_gnn};
pub use driver::{train_cnn, train_gnn, ClassWeighting, EpochStats, GraphSample, LabeledPatch, TrainConfig, TrainLog};
pub use optim::{class_weights, he_init, init_params, kfold_split, Fold, SgdMomentum};
