//! Segment sampling statistics and the evaluation protocol.

mod common;

use common::sample_trajectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tesla_core::augment::AugPolicy;
use tesla_core::data::{BlobSpec, Split};
use tesla_core::distill::{init_synthetic, InitMode};
use tesla_core::eval::{cross_arch_eval, desk_arch_list, evaluate_real, evaluate_synthetic, EvalConfig};
use tesla_core::nn::ModelArch;
use tesla_core::trajectory::TrajectoryStore;
use tesla_core::Error;

/// Upper 1% point of χ² with 14 degrees of freedom.
const CHI2_14_P01: f64 = 29.141;

#[test]
fn segment_draws_are_uniform_over_trajectory_and_start() {
    let trajs: Vec<_> = (0..3).map(|s| sample_trajectory(s, 6)).collect();
    let store = TrajectoryStore::new(trajs[0].arch.clone(), "fp".into(), trajs).unwrap();
    let (max_start, m) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [[0usize; 5]; 3];
    let draws = 10_000;
    for _ in 0..draws {
        let seg = store.sample_segment(max_start, m, &mut rng).unwrap();
        let t = &store.trajectories[seg.trajectory];
        assert_eq!(seg.start, &t.checkpoints[seg.start_epoch].params);
        assert_eq!(seg.target, &t.checkpoints[seg.start_epoch + m].params);
        counts[seg.trajectory][seg.start_epoch] += 1;
    }
    let expected = draws as f64 / 15.0;
    let chi2: f64 = counts.iter().flatten().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_14_P01, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn segment_beyond_trajectory_is_rejected() {
    let store = TrajectoryStore::new(sample_trajectory(0, 3).arch.clone(), "fp".into(), vec![sample_trajectory(0, 3)])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(store.sample_segment(2, 2, &mut rng), Err(Error::InsufficientEpochs { .. })));
    assert!(store.sample_segment(1, 2, &mut rng).is_ok());
}

fn small_blobs() -> (tesla_core::data::LabeledDataset, tesla_core::data::LabeledDataset) {
    let spec = BlobSpec { classes: 3, per_class: 20, test_per_class: 20, shape: [1, 16, 16], separation: 5.0, seed: 3 };
    (spec.generate(Split::Train).unwrap(), spec.generate(Split::Test).unwrap())
}

fn quick_eval() -> EvalConfig {
    EvalConfig { steps: 15, seeds: vec![0, 1, 2], augment: AugPolicy::none(), ..EvalConfig::default() }
}

#[test]
fn cross_arch_reports_match_single_evaluations() {
    let (train, test) = small_blobs();
    let syn = init_synthetic(&train, 2, InitMode::RealSample, 5).unwrap();
    let archs = desk_arch_list(3, [1, 16, 16], 8);
    let names: Vec<String> = archs.iter().map(|a| a.name()).collect();
    assert_eq!(archs.len(), 3, "{names:?}");
    let reports = cross_arch_eval(&syn, &test, &archs, &quick_eval()).unwrap();
    for (arch, report) in archs.iter().zip(&reports) {
        assert!(report.is_consistent());
        assert_eq!(report.accuracies.len(), 3);
        assert!(report.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(report, &evaluate_synthetic(&syn, &test, arch, &quick_eval()).unwrap());
    }
}

#[test]
fn incompatible_arch_rejected_before_training() {
    let (train, test) = small_blobs();
    let syn = init_synthetic(&train, 1, InitMode::RealSample, 5).unwrap();
    let mut archs = desk_arch_list(3, [1, 16, 16], 8);
    archs.push(ModelArch::mlp(1, 8, 10, [1, 16, 16]));
    assert!(matches!(cross_arch_eval(&syn, &test, &archs, &quick_eval()), Err(Error::ArchMismatch { .. })));
}

#[test]
fn duplicate_seeds_rejected() {
    let (train, test) = small_blobs();
    let cfg = EvalConfig { seeds: vec![1, 1], ..quick_eval() };
    let arch = ModelArch::mlp(1, 8, 3, [1, 16, 16]);
    assert!(matches!(evaluate_real(&train, &test, &arch, &cfg), Err(Error::Config(_))));
}

#[test]
fn real_sample_init_is_the_random_baseline() {
    let (train, test) = small_blobs();
    let arch = ModelArch::mlp(1, 8, 3, [1, 16, 16]);
    let syn = init_synthetic(&train, 2, InitMode::RealSample, 8).unwrap();
    let direct = evaluate_synthetic(&syn, &test, &arch, &quick_eval()).unwrap();
    let picked: Vec<usize> = (0..syn.len())
        .map(|j| {
            let row = &syn.images.data()[j * 256..(j + 1) * 256];
            (0..train.len()).find(|&i| &train.images.data()[i * 256..(i + 1) * 256] == row).unwrap()
        })
        .collect();
    let subset = train.subset(&picked).unwrap();
    let baseline = evaluate_real(&subset, &test, &arch, &quick_eval()).unwrap();
    assert_eq!(direct.accuracies, baseline.accuracies);
}
