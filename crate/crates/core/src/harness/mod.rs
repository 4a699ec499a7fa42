//! Optimizers, the training loop and the adapter experiments.

mod experiment;
mod optim;
mod train;

pub use experiment::{
    adapt, compare, median, median_updates, pretrain, scratch_vs_adapt, ComparisonRow, ComparisonTable, PathCost,
    SavingsReport, SavingsSeed,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{evaluate, train, EarlyStop, TrainConfig, TrainReport, Trainable};
