//! Ready-made five-client synthetic benchmarks.

use crate::config::{
    CheckpointPolicy, DataSource, ExperimentConfig, LocalOptimizer, SelectionMetric,
};
use crate::data::{PartitionKind, PartitionSpec, DEFAULT_SIZES};
use crate::metrics::Averaging;
use crate::nn::optim::AdamConfig;
use crate::nn::{LayerSpec, LossKind, ModelSpec, DEFAULT_BN_MOMENTUM, DEFAULT_NORM_EPSILON};
use crate::strategies::{Algorithm, StrategyConfig};

pub const INPUT_DIM: usize = 10;
pub const NUM_CLASSES: usize = 4;
pub const HIDDEN: usize = 32;

/// Dense → BatchNorm → ReLU → Dense → softmax.
pub fn benchmark_model() -> ModelSpec {
    ModelSpec {
        input_dim: INPUT_DIM,
        layers: vec![
            LayerSpec::Dense { width: HIDDEN },
            LayerSpec::BatchNorm {
                epsilon: DEFAULT_NORM_EPSILON,
                momentum: DEFAULT_BN_MOMENTUM,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { width: NUM_CLASSES },
            LayerSpec::SoftmaxCeHead,
        ],
        loss: LossKind::CrossEntropy,
        num_classes: NUM_CLASSES,
    }
}

/// Strategy with the benchmark's default hyperparameters for `algorithm`.
pub fn default_strategy(algorithm: Algorithm) -> StrategyConfig {
    let s = StrategyConfig::new(algorithm);
    match algorithm {
        Algorithm::FedProx | Algorithm::FedPxn => s.with_mu(0.01),
        Algorithm::FedDyn => s.with_alpha(0.01),
        a if a.is_fedopt() => s.with_fedopt(0.01, 0.9, 0.99, 0.001),
        _ => s,
    }
}

fn benchmark(algorithm: Algorithm, kind: PartitionKind) -> ExperimentConfig {
    let data = PartitionSpec {
        kind,
        num_clients: DEFAULT_SIZES.len(),
        num_classes: NUM_CLASSES,
        input_dim: INPUT_DIM,
        sizes: DEFAULT_SIZES.iter().map(|n| n / 2).collect(),
        skew_concentration: 0.1,
        shift_scale: if kind == PartitionKind::FeatureShift {
            1.0
        } else {
            0.0
        },
        class_separation: 1.5,
        min_per_class: 0,
        seed: 0,
    };
    ExperimentConfig {
        model: benchmark_model(),
        strategy: default_strategy(algorithm),
        data: DataSource::Synthetic(data),
        num_clients: DEFAULT_SIZES.len(),
        local_epochs: 1,
        rounds: 50,
        total_budget: Some(50),
        eta: 0.01,
        local_optimizer: LocalOptimizer::Adam(AdamConfig::default()),
        batch_size: 32,
        seeds: vec![0, 1, 2],
        selection_metric: SelectionMetric::Auroc,
        averaging: Averaging::Macro,
        checkpoints: CheckpointPolicy::BestAndLast,
        out_dir: None,
    }
}

/// Clients share the labelling rule; each applies its own affine feature map.
pub fn feature_shift_benchmark(algorithm: Algorithm) -> ExperimentConfig {
    benchmark(algorithm, PartitionKind::FeatureShift)
}

/// Clients share class-conditional features; class proportions are Dirichlet(0.1).
pub fn label_skew_benchmark(algorithm: Algorithm) -> ExperimentConfig {
    benchmark(algorithm, PartitionKind::LabelSkew)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_for_every_algorithm() {
        for alg in Algorithm::ALL {
            feature_shift_benchmark(alg).validated().unwrap();
            label_skew_benchmark(alg).validated().unwrap();
        }
    }
}
