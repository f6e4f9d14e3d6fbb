//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tesla_core::augment::{AugPolicy, Transform};
use tesla_core::distill::{make_batch_plan, BatchPlan, MatchProblem};
use tesla_core::nn::{init_params, ModelArch, ParamVector};
use tesla_core::{Element, Tensor};

/// Shape of one fuzzed matching problem.
#[derive(Debug, Clone, Copy)]
pub struct TinySpec {
    pub n: usize,
    pub batch: usize,
    pub steps: usize,
    pub depth: usize,
    pub augment: bool,
    pub seed: u64,
}

impl TinySpec {
    /// MLP 20→8→3 on six images, batch 2, four steps.
    pub fn reference(seed: u64) -> Self {
        Self { n: 6, batch: 2, steps: 4, depth: 1, augment: false, seed }
    }

    /// Varies n, B, T, depth and augmentation around the reference.
    pub fn fuzzed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Self {
            n: rng.random_range(2..9),
            batch: rng.random_range(1..5),
            steps: rng.random_range(1..7),
            depth: rng.random_range(1..3),
            augment: rng.random_bool(0.5),
            seed,
        }
    }
}

pub struct Fixture<F: Element> {
    pub arch: ModelArch,
    pub start: ParamVector<F>,
    pub target: ParamVector<F>,
    pub images: Tensor<F>,
    pub labels: Tensor<F>,
    pub plan: BatchPlan,
    pub policy: AugPolicy,
}

impl<F: Element> Fixture<F> {
    pub fn new(spec: TinySpec) -> Self {
        let arch = ModelArch::mlp(spec.depth, 8, 3, [1, 4, 5]);
        let start = init_params::<F>(&arch, spec.seed).unwrap();
        let other = init_params::<F>(&arch, spec.seed + 100).unwrap();
        let target = start
            .with_values(start.as_slice().iter().zip(other.as_slice()).map(|(&a, &b)| a + F::of(0.05) * b).collect())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let images = Tensor::new(
            vec![spec.n, 1, 4, 5],
            (0..spec.n * 20).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect(),
        )
        .unwrap();
        let logits = Tensor::new(
            vec![spec.n, 3],
            (0..spec.n * 3).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect(),
        )
        .unwrap();
        let labels = logits.softmax_rows().unwrap();
        let plan = make_batch_plan(spec.n, spec.batch, spec.steps, &mut rng).unwrap();
        let policy = if spec.augment {
            AugPolicy {
                transforms: vec![
                    Transform::Flip,
                    Transform::Translate { max_shift: 1 },
                    Transform::Brightness { delta: 0.2 },
                    Transform::Contrast { delta: 0.2 },
                ],
            }
        } else {
            AugPolicy::none()
        };
        Self { arch, start, target, images, labels, plan, policy }
    }

    pub fn problem(&self, beta: f64) -> MatchProblem<'_, F> {
        MatchProblem {
            arch: &self.arch,
            start: &self.start,
            target: &self.target,
            images: &self.images,
            labels: &self.labels,
            labels_are_logits: false,
            plan: &self.plan,
            beta,
            policy: &self.policy,
            seed: 11,
            iteration: 0,
        }
    }
}

/// Largest per-coordinate `|a − b| / max(|b|, floor · max|b|)`.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())) * floor;
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(scale).max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
}

pub fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    (diff / base).sqrt()
}

/// A hand-built trajectory over a tiny MLP: no training needed.
pub fn sample_trajectory(seed: u64, epochs: usize) -> tesla_core::trajectory::Trajectory {
    use tesla_core::trajectory::{Checkpoint, TeacherConfig, Trajectory};
    let arch = ModelArch::mlp(1, 8, 3, [1, 4, 5]);
    let checkpoints = (0..=epochs)
        .map(|e| Checkpoint { epoch: e as u32, params: init_params::<f32>(&arch, seed * 1000 + e as u64).unwrap() })
        .collect();
    Trajectory {
        arch,
        config: TeacherConfig { seed, ..TeacherConfig::default() },
        checkpoints,
        test_accuracy: Some(0.5),
    }
}

/// A small synthetic set with soft labels and every optional field set.
pub fn sample_synthetic(seed: u64) -> tesla_core::distill::SyntheticDataset {
    use tesla_core::distill::{LabelMode, SyntheticDataset};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (classes, ipc) = (3, 2);
    let n = classes * ipc;
    let images = Tensor::new(vec![n, 1, 4, 5], (0..n * 20).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let logits = Tensor::new(vec![n, classes], (0..n * classes).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
    SyntheticDataset {
        images,
        classes,
        ipc,
        label_mode: LabelMode::SlaTarget,
        labels: logits.softmax_rows().unwrap(),
        beta: 0.0125,
        zca: Some("zca(eps=0.1)".into()),
        config_hash: Some(format!("{seed:064x}")),
    }
}

/// One corruption drawn from `rng`: truncation, a byte flip, extra bytes,
/// or a wrong version field.
pub fn corrupt(bytes: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match rng.random_range(0..4) {
        0 => out.truncate(rng.random_range(0..bytes.len())),
        1 => {
            let i = rng.random_range(0..out.len());
            out[i] ^= 1 << rng.random_range(0..8);
        }
        2 => {
            let extra = rng.random_range(1..16);
            out.extend((0..extra).map(|_| rng.random::<u8>()));
        }
        _ => {
            let v: u32 = rng.random_range(2..u32::MAX);
            out[8..12].copy_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Rewrites the trailer so a mutated payload passes the checksum and
/// exercises the structural checks.
pub fn reseal(bytes: &mut Vec<u8>) {
    if bytes.len() < 8 {
        return;
    }
    let body = bytes.len() - 8;
    let sum = tesla_core::binfmt::checksum64(&bytes[..body]);
    bytes[body..].copy_from_slice(&sum.to_le_bytes());
}
