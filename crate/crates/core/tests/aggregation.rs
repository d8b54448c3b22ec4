mod common;

use std::collections::BTreeSet;

use common::rng;
use fedsim_core::params::{partition_names, weighted_average, ClientWeight};
use fedsim_core::strategies::{init_server_state, server_aggregate, ClientUpdate};
use fedsim_core::{
    Algorithm, Error, ExclusionPolicy, ParamMeta, ParamRole, ParamSet, StrategyConfig, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

fn random_set(r: &mut impl Rng, shapes: &[(String, Vec<usize>, ParamMeta)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape, meta) in shapes {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.random_range(-3.0..3.0)).collect();
        p.insert(
            name.clone(),
            Tensor::new(shape.clone(), data).unwrap(),
            *meta,
        );
    }
    p
}

fn random_layout(r: &mut impl Rng) -> Vec<(String, Vec<usize>, ParamMeta)> {
    let metas = [
        ParamMeta::dense(ParamRole::Weight),
        ParamMeta::dense(ParamRole::Bias),
        ParamMeta::norm(ParamRole::Gain, true),
        ParamMeta::norm(ParamRole::Shift, true),
        ParamMeta::norm(ParamRole::RunningMean, true),
        ParamMeta::norm(ParamRole::Gain, false),
    ];
    (0..r.random_range(1..6))
        .map(|i| {
            let shape = if r.random_bool(0.5) {
                vec![r.random_range(1..5), r.random_range(1..5)]
            } else {
                vec![r.random_range(1..7)]
            };
            (
                format!("p{i}"),
                shape,
                metas[r.random_range(0..metas.len())],
            )
        })
        .collect()
}

#[test]
fn weighted_average_matches_naive_loop() {
    check_weighted_average_matches_naive_loop();
}

pub fn check_weighted_average_matches_naive_loop() {
    for inst in 0..100u64 {
        let mut r = rng(&[0xa99, inst]);
        let layout = random_layout(&mut r);
        let k = r.random_range(1..7);
        let sets: Vec<ParamSet> = (0..k).map(|_| random_set(&mut r, &layout)).collect();
        let sizes: Vec<(usize, usize)> = (0..k).map(|id| (id, r.random_range(1..5000))).collect();
        let weights = ClientWeight::from_sizes(&sizes);
        let refs: Vec<&ParamSet> = sets.iter().collect();
        let names = sets[0].names();
        let avg = weighted_average(&refs, &weights, &names).unwrap();
        let n: usize = sizes.iter().map(|s| s.1).sum();
        for (name, _, _) in &layout {
            let got = avg.tensor(name).unwrap().data();
            for i in 0..got.len() {
                let mut expect = 0.0;
                for (s, &(_, n_k)) in sets.iter().zip(&sizes) {
                    expect += (n_k as f64 / n as f64) * s.tensor(name).unwrap().data()[i];
                }
                assert!(
                    (got[i] - expect).abs() <= 1e-12,
                    "instance {inst} `{name}`[{i}]"
                );
            }
        }
    }
}

#[test]
fn weights_off_unity_are_rejected() {
    check_weights_off_unity_are_rejected();
}

pub fn check_weights_off_unity_are_rejected() {
    let mut r = rng(&[0xa9a]);
    let layout = random_layout(&mut r);
    let sets = [random_set(&mut r, &layout), random_set(&mut r, &layout)];
    let refs: Vec<&ParamSet> = sets.iter().collect();
    for total in [1.0 + 3e-12, 1.0 - 3e-12, 0.5, 2.0] {
        let w = vec![
            ClientWeight {
                client_id: 0,
                n_k: 1,
                weight: 0.5,
            },
            ClientWeight {
                client_id: 1,
                n_k: 1,
                weight: total - 0.5,
            },
        ];
        assert!(matches!(
            weighted_average(&refs, &w, &sets[0].names()),
            Err(Error::WeightSumViolation(_))
        ));
    }
}

#[test]
fn single_unit_weight_is_identity() {
    let mut r = rng(&[0xa9b]);
    let layout = random_layout(&mut r);
    let s = random_set(&mut r, &layout);
    let w = ClientWeight::from_sizes(&[(0, 17)]);
    assert!(weighted_average(&[&s], &w, &s.names())
        .unwrap()
        .bitwise_eq(&s));
}

fn updates_for(seed: u64, k: usize) -> (ParamSet, Vec<ClientUpdate>) {
    let mut r = rng(&[0xa9c, seed]);
    let layout = random_layout(&mut r);
    let global = random_set(&mut r, &layout);
    let updates = (0..k)
        .map(|id| ClientUpdate {
            client_id: id,
            params_after: random_set(&mut r, &layout),
            n_k: r.random_range(1..100),
            train_loss: 0.0,
            diverged: false,
        })
        .collect();
    (global, updates)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_arrival_order(seed in 0u64..10_000, k in 1usize..6, rot in 0usize..6) {
        let (global, updates) = updates_for(seed, k);
        for alg in Algorithm::ALL {
            let cfg = fedsim_core::presets::default_strategy(alg).validated().unwrap();
            let server = init_server_state(&cfg, &global);
            let a = server_aggregate(&cfg, &server, &updates).unwrap();
            let mut shuffled = updates.clone();
            shuffled.rotate_left(rot % k);
            shuffled.reverse();
            let b = server_aggregate(&cfg, &server, &shuffled).unwrap();
            prop_assert!(a.global.bitwise_eq(&b.global));
        }
    }

    #[test]
    fn equal_points_average_to_themselves(seed in 0u64..10_000, k in 1usize..6) {
        let (global, mut updates) = updates_for(seed, k);
        let same = updates[0].params_after.clone();
        for u in &mut updates {
            u.params_after = same.clone();
        }
        let cfg = StrategyConfig::new(Algorithm::FedAvg).validated().unwrap();
        let next = server_aggregate(&cfg, &init_server_state(&cfg, &global), &updates).unwrap();
        for (name, p) in same.iter() {
            let q = next.global.tensor(name).unwrap();
            for (x, y) in p.value.data().iter().zip(q.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn policies_partition_names(seed in 0u64..10_000) {
        let mut r = rng(&[0xa9d, seed]);
        let layout = random_layout(&mut r);
        let p = random_set(&mut r, &layout);
        for policy in [
            ExclusionPolicy::None,
            ExclusionPolicy::AllNormExcluded,
            ExclusionPolicy::StatsOnlyExcluded,
            ExclusionPolicy::RescalingAggregated,
        ] {
            let (ex, agg) = partition_names(&p, policy);
            prop_assert!(ex.is_disjoint(&agg));
            let union: BTreeSet<String> = ex.union(&agg).cloned().collect();
            prop_assert_eq!(union, p.names());
            for n in &agg {
                let meta = p.get(n).unwrap().meta;
                prop_assert!(!policy.excludes(&meta));
            }
        }
    }
}
