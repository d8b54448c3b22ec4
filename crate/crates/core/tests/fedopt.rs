mod common;

use common::rng;
use fedsim_core::strategies::{init_server_state, server_aggregate, ClientUpdate, ServerState};
use fedsim_core::{Algorithm, ParamMeta, ParamRole, ParamSet, StrategyConfig, Tensor};
use rand::Rng;

fn scalar(w: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(
        "w",
        Tensor::vector(vec![w]),
        ParamMeta::dense(ParamRole::Weight),
    );
    p
}

fn value(s: &ServerState) -> f64 {
    s.global.tensor("w").unwrap().data()[0]
}

/// Scalar recomputation of the adaptive server update with data-size weights.
fn oracle(
    alg: Algorithm,
    w0: f64,
    rounds: &[Vec<(f64, usize)>],
    eta_g: f64,
    b1: f64,
    b2: f64,
    gamma: f64,
) -> Vec<(f64, f64, f64)> {
    let (mut w, mut m, mut v) = (w0, 0.0, gamma * gamma);
    let mut out = Vec::new();
    for clients in rounds {
        let n: usize = clients.iter().map(|c| c.1).sum();
        let delta: f64 = clients
            .iter()
            .map(|&(x, nk)| nk as f64 / n as f64 * (x - w))
            .sum();
        m = b1 * m + (1.0 - b1) * delta;
        let d2 = delta * delta;
        v = match alg {
            Algorithm::FedAdam => b2 * v + (1.0 - b2) * d2,
            Algorithm::FedAdagrad => v + d2,
            Algorithm::FedYogi => {
                let s = if v - d2 > 0.0 {
                    1.0
                } else if v - d2 < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (v - (1.0 - b2) * d2 * s).max(gamma * gamma)
            }
            _ => unreachable!(),
        };
        w += eta_g * m / (v.sqrt() + gamma);
        out.push((w, m, v));
    }
    out
}

#[test]
fn three_round_scalar_trajectories() {
    check_three_round_scalar_trajectories();
}

pub fn check_three_round_scalar_trajectories() {
    for alg in [
        Algorithm::FedAdam,
        Algorithm::FedAdagrad,
        Algorithm::FedYogi,
    ] {
        for inst in 0..20u64 {
            let mut r = rng(&[0xf0, alg as u64, inst]);
            let (eta_g, b1, b2, gamma) = (
                r.random_range(0.001..0.5),
                r.random_range(0.0..0.99),
                r.random_range(0.0..0.999),
                r.random_range(1e-4..0.2),
            );
            let w0 = r.random_range(-2.0..2.0);
            let k = r.random_range(1..5);
            let sizes: Vec<usize> = (0..k).map(|_| r.random_range(1..50)).collect();
            let rounds: Vec<Vec<(f64, usize)>> = (0..3)
                .map(|_| {
                    sizes
                        .iter()
                        .map(|&n| (r.random_range(-3.0..3.0), n))
                        .collect()
                })
                .collect();
            let cfg = StrategyConfig::new(alg)
                .with_fedopt(eta_g, b1, b2, gamma)
                .validated()
                .unwrap();
            let mut server = init_server_state(&cfg, &scalar(w0));
            let expect = oracle(alg, w0, &rounds, eta_g, b1, b2, gamma);
            for (clients, &(w, m, v)) in rounds.iter().zip(&expect) {
                let updates: Vec<ClientUpdate> = clients
                    .iter()
                    .enumerate()
                    .map(|(id, &(x, n_k))| ClientUpdate {
                        client_id: id,
                        params_after: scalar(x),
                        n_k,
                        train_loss: 0.0,
                        diverged: false,
                    })
                    .collect();
                server = server_aggregate(&cfg, &server, &updates).unwrap();
                let st = server.adaptive.as_ref().unwrap();
                assert!((value(&server) - w).abs() <= 1e-12, "{alg} w");
                assert!(
                    (st.m.get("w").unwrap().data()[0] - m).abs() <= 1e-12,
                    "{alg} m"
                );
                assert!(
                    (st.v.get("w").unwrap().data()[0] - v).abs() <= 1e-12,
                    "{alg} v"
                );
            }
        }
    }
}

#[test]
fn adagrad_second_moment_never_decreases() {
    check_adagrad_second_moment_never_decreases();
}

pub fn check_adagrad_second_moment_never_decreases() {
    let cfg = StrategyConfig::new(Algorithm::FedAdagrad)
        .with_fedopt(0.05, 0.9, 0.99, 1e-3)
        .validated()
        .unwrap();
    let mut r = rng(&[0xada]);
    let mut w0 = ParamSet::new();
    w0.insert(
        "a",
        Tensor::vector(vec![0.0; 4]),
        ParamMeta::dense(ParamRole::Weight),
    );
    w0.insert(
        "b",
        Tensor::vector(vec![0.0; 3]),
        ParamMeta::norm(ParamRole::Gain, false),
    );
    let mut server = init_server_state(&cfg, &w0);
    let mut prev = server.adaptive.clone().unwrap().v;
    for _ in 0..50 {
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|id| {
                let mut p = server.global.clone();
                for name in ["a", "b"] {
                    for x in p.tensor_mut(name).unwrap().data_mut() {
                        *x += r.random_range(-1.0..1.0);
                    }
                }
                ClientUpdate {
                    client_id: id,
                    params_after: p,
                    n_k: 10 + id,
                    train_loss: 0.0,
                    diverged: false,
                }
            })
            .collect();
        server = server_aggregate(&cfg, &server, &updates).unwrap();
        let v = server.adaptive.clone().unwrap().v;
        for (name, t) in v.iter() {
            for (a, b) in t.data().iter().zip(prev.get(name).unwrap().data()) {
                assert!(a >= b);
            }
        }
        prev = v;
    }
}
