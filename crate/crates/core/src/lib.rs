//! Neuron incidence redistribution: a label-free regularizer that spreads
//! positive-class evidence across the penultimate layer of a binary
//! classifier, together with the tooling needed to study it.
//!
//! - [`data`]: entangled synthetic datasets, CSV I/O, stratified splits.
//! - [`model`]: a small rectified MLP with hand-written backprop.
//! - [`nir`]: incidence, the variance penalty and its gradients.
//! - [`trainer`]: Adam with early stopping on validation AUC.
//! - [`fairness`]: AUC, Youden threshold, subgroup TPR/FPR disparity.
//! - [`analysis`]: top-k neuron activations across subgroups.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod fairness;
pub mod matrix;
pub mod model;
pub mod nir;
pub mod trainer;

pub use analysis::{ActivationMatrix, SubgroupCell};
pub use config::RunConfig;
pub use data::{Dataset, SplitFractions, SyntheticConfig};
pub use error::{NirError, Result};
pub use fairness::FairnessReport;
pub use matrix::Matrix;
pub use model::{Architecture, ForwardTrace, Gradients, ModelParams};
pub use nir::{IncidenceVector, LossBreakdown};
pub use trainer::{TrainConfig, TrainingLog};
