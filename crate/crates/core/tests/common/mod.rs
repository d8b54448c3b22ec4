#![allow(dead_code)]

use fedsim_core::nn::{
    model_backward, model_forward, Batch, Labels, LayerSpec, LossKind, Mode, ModelSpec,
};
use fedsim_core::rng::rng_for;
use fedsim_core::{GradSet, ParamRole, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    rng_for(parts)
}

pub fn random_batch(rng: &mut impl Rng, n: usize, d: usize, classes: usize) -> Batch {
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..n)
        .map(|i| {
            if i < classes {
                i
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    Batch::new(Tensor::new(vec![n, d], x).unwrap(), Labels::Classes(y)).unwrap()
}

/// Dense → optional normalization → Dense → softmax; smooth in every parameter.
pub fn probe_model(norm: Option<LayerSpec>, d: usize, h: usize, c: usize) -> ModelSpec {
    let mut layers = vec![LayerSpec::Dense { width: h }];
    layers.extend(norm);
    layers.push(LayerSpec::Dense { width: c });
    layers.push(LayerSpec::SoftmaxCeHead);
    ModelSpec {
        input_dim: d,
        layers,
        loss: LossKind::CrossEntropy,
        num_classes: c,
    }
}

/// Replaces every trainable entry by random values (gains near 1).
pub fn randomize(params: &mut ParamSet, rng: &mut impl Rng) {
    let names: Vec<(String, ParamRole)> = params
        .iter()
        .filter(|(_, p)| p.meta.trainable())
        .map(|(n, p)| (n.clone(), p.meta.role))
        .collect();
    for (name, role) in names {
        let t = params.tensor_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = match role {
                ParamRole::Gain => rng.random_range(0.5..1.5),
                _ => rng.random_range(-0.8..0.8),
            };
        }
    }
}

pub fn train_loss(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> f64 {
    model_forward(spec, params, batch, Mode::Train)
        .unwrap()
        .loss
}

pub fn analytic_grad(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> GradSet {
    let out = model_forward(spec, params, batch, Mode::Train).unwrap();
    model_backward(spec, params, &out.cache).unwrap()
}

/// Central differences of `f` over every entry named in `analytic`, compared by
/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
pub fn fd_relative_error(
    analytic: &GradSet,
    params: &ParamSet,
    f: impl Fn(&ParamSet) -> f64,
) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (name, g) in analytic.iter() {
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.tensor_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensor_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            let a = g.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// The four layer families checked against finite differences.
pub fn layer_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Option<LayerSpec>)> {
    vec![
        ("dense", |_| None),
        ("batch_norm", |_| {
            Some(LayerSpec::BatchNorm {
                epsilon: 1e-5,
                momentum: 0.1,
            })
        }),
        ("layer_norm", |_| {
            Some(LayerSpec::LayerNorm { epsilon: 1e-5 })
        }),
        ("group_norm", |r| {
            Some(LayerSpec::GroupNorm {
                groups: [1, 2, 3][r.random_range(0..3)],
                epsilon: 1e-5,
            })
        }),
    ]
}

/// Largest relative error over `instances` seeded problems for one layer case.
pub fn layer_gradient_error(case: usize, instances: u64) -> f64 {
    let (_, make) = layer_cases()[case];
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(&[0xfd, case as u64, seed]);
        let d = r.random_range(2..6);
        let h = 6;
        let c = r.random_range(2..5);
        let n = r.random_range(4..10);
        let spec = probe_model(make(&mut r), d, h, c);
        let mut params = spec.init_params(&mut r).unwrap();
        randomize(&mut params, &mut r);
        let batch = random_batch(&mut r, n, d, c);
        let g = analytic_grad(&spec, &params, &batch);
        worst = worst.max(fd_relative_error(&g, &params, |p| {
            train_loss(&spec, p, &batch)
        }));
    }
    worst
}
