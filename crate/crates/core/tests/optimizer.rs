mod common;

use rand::Rng;
use stagelora_core::costmodel::CostModel;
use stagelora_core::optimizer::{minimize_gap, optimize, search_partition_batch, OptDocument};
use stagelora_core::schedule::{build_schedule, micro_batch_count, simulate, Workload};

fn random_instance(seed: u64) -> (CostModel, Workload, usize, usize) {
    let mut rng = common::rng(seed);
    let devices = rng.random_range(1..=4);
    let layers = rng.random_range(devices..=10);
    let training = rng.random_range(1..=3);
    let frozen = rng.random_range(0..=6 - training);
    let w = common::workload(training, frozen);
    let all: Vec<String> = w.training.iter().chain(&w.frozen).cloned().collect();
    let cm = common::random_profile(&mut rng, devices, layers, &all);
    (cm, w, rng.random_range(1..=8), rng.random_range(1..=24))
}

#[test]
fn matches_two_phase_enumeration() {
    for seed in 0..20 {
        let (cm, w, k_max, dataset) = random_instance(seed);
        let got = optimize(&cm, &w, k_max, dataset).unwrap();
        let want = common::two_phase_oracle(&cm, &w, k_max, dataset);
        assert_eq!(
            got.grouping.train_devices, want.train_devices,
            "seed {seed}"
        );
        assert_eq!(got.grouping.offloaded, want.offloaded, "seed {seed}");
        assert_eq!(got.gap.as_ref().unwrap().gap, want.gap, "seed {seed}");
        assert_eq!(got.c_min, want.c_min, "seed {seed}");
        assert_eq!((got.k, got.partition.q()), (want.k, want.q), "seed {seed}");
        let s = build_schedule(
            &w,
            &got.grouping,
            &got.partition,
            got.k,
            micro_batch_count(dataset, got.k),
        )
        .unwrap();
        assert_eq!(simulate(&s, &cm).unwrap().makespan, got.c_min);
    }
}

#[test]
fn larger_k_max_never_hurts() {
    for seed in 100..110 {
        let (cm, w, _, dataset) = random_instance(seed);
        let g = minimize_gap(&cm, &w).unwrap().grouping();
        let mut prev = f64::INFINITY;
        for k_max in 1..=6 {
            let r = search_partition_batch(&cm, &w, &g, k_max, dataset).unwrap();
            assert!(r.c_min <= prev);
            prev = r.c_min;
        }
    }
}

#[test]
fn uniform_speedup_keeps_the_argmin() {
    for seed in 200..210 {
        let (cm, w, k_max, dataset) = random_instance(seed);
        let base = optimize(&cm, &w, k_max, dataset).unwrap();
        let fast = optimize(&cm.scaled(10.0), &w, k_max, dataset).unwrap();
        assert_eq!(fast.grouping, base.grouping, "seed {seed}");
        assert_eq!(
            (fast.k, fast.partition.q()),
            (base.k, base.partition.q()),
            "seed {seed}"
        );
        assert!((fast.c_min - base.c_min / 10.0).abs() <= 1e-9 * base.c_min.max(1.0));
    }
}

#[test]
fn k_max_one_is_partition_only() {
    for seed in 300..306 {
        let (cm, w, _, dataset) = random_instance(seed);
        let r = optimize(&cm, &w, 1, dataset).unwrap();
        assert_eq!(r.k, 1);
        let want = common::two_phase_oracle(&cm, &w, 1, dataset);
        assert_eq!(r.c_min, want.c_min);
    }
}

#[test]
fn fixture_profile_answer() {
    let cm = CostModel::from_json(include_str!("fixtures/opt_profile.json")).unwrap();
    let w = Workload {
        training: vec!["T".into()],
        frozen: vec!["F".into()],
    };
    let r = optimize(&cm, &w, 4, 16).unwrap();
    let want: OptDocument =
        serde_json::from_str(include_str!("fixtures/opt_expected.json")).unwrap();
    assert_eq!(r.to_document(&w), want);
    let oracle = common::two_phase_oracle(&cm, &w, 4, 16);
    assert_eq!(oracle.c_min, want.c_min);
}
