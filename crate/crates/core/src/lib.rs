//! Federated learning simulation core: a small normalized MLP, federated
//! aggregation strategies, synthetic heterogeneous clients, the round
//! orchestrator and evaluation metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod params;
pub mod presets;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use config::{
    parse_and_validate_config, CheckpointPolicy, DataSource, ExperimentConfig, GridSpec,
    LocalOptimizer, SelectionMetric,
};
pub use data::{ClientDataset, PartitionKind, PartitionSpec};
pub use error::{Error, Result};
pub use nn::{Batch, Labels, LayerSpec, LossKind, Mode, ModelSpec};
pub use orchestrator::{
    compare_results, run_experiment, sweep_local_epochs, Experiment, ExperimentResult, RoundRecord,
};
pub use params::{ExclusionPolicy, GradSet, NormTag, ParamMeta, ParamRole, ParamSet};
pub use strategies::{Algorithm, StrategyConfig};
pub use tensor::Tensor;
