//! Evaluation by training fresh models on a (synthetic) set, and the
//! memory/runtime benchmark of the two gradient engines.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::data::LabeledDataset;
use crate::distill::{
    full_unroll_oracle, make_batch_plan, student_unroll, tesla_grad, MatchProblem, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::nn::{init_params, one_hot, ModelArch};
use crate::parallel::parallel_map;
use crate::tensor::Tensor;
use crate::train::{fit_steps, test_accuracy, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugPolicy,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 256,
            augment: AugPolicy::none(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: ModelArch,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    /// Models whose training hit a non-finite loss.
    pub diverged: Vec<bool>,
    pub config: EvalConfig,
    pub synthetic_hash: Option<String>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Whether `mean` and `std` are exactly what the entries give.
    pub fn is_consistent(&self) -> bool {
        let (m, s) = mean_std(&self.accuracies);
        m.to_bits() == self.mean.to_bits() && s.to_bits() == self.std.to_bits()
    }
}

fn check_compatible(arch: &ModelArch, shape: [usize; 3], classes: usize) -> Result<()> {
    arch.validate()?;
    if arch.input != shape || arch.classes != classes {
        return Err(Error::ArchMismatch {
            expected: format!("input {shape:?} with {classes} classes"),
            found: arch.name(),
        });
    }
    Ok(())
}

/// Trains one model per seed on `(images, targets)` and measures accuracy on
/// `test`. A diverging model keeps the accuracy of its last finite state.
pub fn evaluate_tensors(
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
    test: &LabeledDataset,
    arch: &ModelArch,
    cfg: &EvalConfig,
    synthetic_hash: Option<String>,
) -> Result<EvalReport> {
    let shape = [images.shape()[1], images.shape()[2], images.shape()[3]];
    check_compatible(arch, shape, targets.shape()[1])?;
    check_compatible(arch, test.image_shape(), test.classes)?;
    let mut distinct = cfg.seeds.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if cfg.seeds.is_empty() || distinct.len() != cfg.seeds.len() {
        return Err(Error::Config("evaluation seeds must be distinct and non-empty".into()));
    }
    let fit = FitConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size.min(images.shape()[0]),
        augment: cfg.augment.clone(),
    };
    let runs = parallel_map(&cfg.seeds, |&seed| -> Result<(f64, bool)> {
        let mut params = init_params::<f32>(arch, seed)?;
        let diverged = match fit_steps(arch, &mut params, images, targets, cfg.steps, &fit, seed) {
            Ok(_) => false,
            Err(e) if e.is_numeric_fault() => true,
            Err(e) => return Err(e),
        };
        let acc = match test_accuracy(arch, &params, &test.images, &test.labels) {
            Ok(a) => a,
            Err(e) if e.is_numeric_fault() => 0.0,
            Err(e) => return Err(e),
        };
        Ok((acc, diverged))
    });
    let mut accuracies = Vec::with_capacity(runs.len());
    let mut diverged = Vec::with_capacity(runs.len());
    for r in runs {
        let (a, d) = r?;
        accuracies.push(a);
        diverged.push(d);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalReport {
        arch: arch.clone(),
        accuracies,
        mean,
        std,
        diverged,
        config: cfg.clone(),
        synthetic_hash,
    })
}

pub fn evaluate_synthetic(
    syn: &SyntheticDataset,
    test: &LabeledDataset,
    arch: &ModelArch,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if syn.is_empty() {
        return Err(Error::Config("empty synthetic set".into()));
    }
    let hash = crate::binfmt::sha256_hex(&syn.encode()?);
    evaluate_tensors(&syn.images, &syn.targets()?, test, arch, cfg, Some(hash))
}

/// Real images with one-hot labels, e.g. the full training set.
pub fn evaluate_real(
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &ModelArch,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let targets = one_hot(&train.labels, train.classes)?;
    evaluate_tensors(&train.images, &targets, test, arch, cfg, Some(train.fingerprint()))
}

/// ConvNet depth 3, ConvNet depth 4 and a one-hidden-layer MLP.
pub fn desk_arch_list(classes: usize, input: [usize; 3], width: usize) -> Vec<ModelArch> {
    let conv = |depth| ModelArch {
        width,
        ..ModelArch::convnet(depth, classes, input)
    };
    vec![conv(3), conv(4), ModelArch::mlp(1, width.max(32), classes, input)]
}

/// One report per architecture; every architecture is checked before any
/// training starts.
pub fn cross_arch_eval(
    syn: &SyntheticDataset,
    test: &LabeledDataset,
    archs: &[ModelArch],
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    for a in archs {
        check_compatible(a, syn.image_shape(), syn.classes)?;
    }
    archs.iter().map(|a| evaluate_synthetic(syn, test, a, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Tesla,
    FullUnroll,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Tesla => "tesla",
            BenchMode::FullUnroll => "full_unroll",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub t: usize,
    pub b: usize,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
    pub ms_per_iter: f64,
}

/// Problem used by the benchmark: random images, soft labels and a pair of
/// nearby parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFixture {
    pub arch: ModelArch,
    pub n: usize,
    pub batch: usize,
    pub beta: f64,
    pub seed: u64,
    /// Full-unroll runs whose projected peak exceeds this are skipped.
    pub max_full_unroll_bytes: usize,
}

impl BenchFixture {
    /// MLP 20→8→3 without normalization, six images, batch two.
    pub fn tiny() -> Self {
        Self {
            arch: ModelArch::mlp(1, 8, 3, [1, 4, 5]),
            n: 6,
            batch: 2,
            beta: 0.01,
            seed: 0,
            max_full_unroll_bytes: 1 << 30,
        }
    }

    /// Small ConvNet on 16×16 single-channel images.
    pub fn convnet() -> Self {
        Self {
            arch: ModelArch {
                width: 16,
                ..ModelArch::convnet(2, 3, [1, 16, 16])
            },
            n: 6,
            batch: 3,
            beta: 0.01,
            seed: 0,
            max_full_unroll_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit { slope, intercept, r2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    /// Peak nodes against `T` for the full unroll.
    pub full_unroll_fit: Option<LinearFit>,
    pub tesla_node_spread: Option<usize>,
    pub tesla_byte_spread: Option<usize>,
    /// Full-unroll lengths skipped for exceeding the byte budget.
    pub truncated: Vec<usize>,
}

fn spread(values: impl Iterator<Item = usize> + Clone) -> Option<usize> {
    Some(values.clone().max()? - values.min()?)
}

/// Runs each mode on the same fixture for every `T` in the sweep.
pub fn bench_memory_runtime(fixture: &BenchFixture, t_sweep: &[usize], modes: &[BenchMode]) -> Result<BenchSummary> {
    let arch = &fixture.arch;
    arch.validate()?;
    let start = init_params::<f32>(arch, fixture.seed)?;
    let other = init_params::<f32>(arch, fixture.seed + 1)?;
    let target = start.with_values(
        start
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a + 0.05 * b)
            .collect(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(fixture.seed);
    let [c, h, w] = arch.input;
    let images = Tensor::new(
        vec![fixture.n, c, h, w],
        (0..fixture.n * c * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
    )?;
    let labels = Tensor::new(
        vec![fixture.n, arch.classes],
        (0..fixture.n * arch.classes).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
    )?
    .softmax_rows()?;
    let policy = AugPolicy::none();

    let mut records = Vec::new();
    let mut truncated = Vec::new();
    for &mode in modes {
        let mut seen: Vec<(f64, f64)> = Vec::new();
        for &t in t_sweep {
            if mode == BenchMode::FullUnroll && seen.len() >= 2 {
                let fit = linear_fit(&seen.iter().map(|p| p.0).collect::<Vec<_>>(), &seen.iter().map(|p| p.1).collect::<Vec<_>>());
                if fit.slope * t as f64 + fit.intercept > fixture.max_full_unroll_bytes as f64 {
                    truncated.push(t);
                    continue;
                }
            }
            let plan = make_batch_plan(fixture.n, fixture.batch, t, &mut ChaCha8Rng::seed_from_u64(fixture.seed + t as u64))?;
            let problem = MatchProblem {
                arch,
                start: &start,
                target: &target,
                images: &images,
                labels: &labels,
                labels_are_logits: false,
                plan: &plan,
                beta: fixture.beta,
                policy: &policy,
                seed: fixture.seed,
                iteration: 0,
            };
            let clock = Instant::now();
            let stats = match mode {
                BenchMode::Tesla => {
                    let u = student_unroll(&problem)?;
                    tesla_grad(&problem, &u)?.stats
                }
                BenchMode::FullUnroll => full_unroll_oracle(&problem)?.stats,
            };
            let ms = clock.elapsed().as_secs_f64() * 1e3;
            seen.push((t as f64, stats.peak_bytes as f64));
            records.push(BenchRecord {
                mode,
                t,
                b: fixture.batch,
                peak_nodes: stats.peak_nodes,
                peak_bytes: stats.peak_bytes,
                ms_per_iter: ms,
            });
        }
    }
    let full: Vec<&BenchRecord> = records.iter().filter(|r| r.mode == BenchMode::FullUnroll).collect();
    let full_unroll_fit = (full.len() >= 2).then(|| {
        linear_fit(
            &full.iter().map(|r| r.t as f64).collect::<Vec<_>>(),
            &full.iter().map(|r| r.peak_nodes as f64).collect::<Vec<_>>(),
        )
    });
    let tesla = records.iter().filter(|r| r.mode == BenchMode::Tesla);
    Ok(BenchSummary {
        tesla_node_spread: spread(tesla.clone().map(|r| r.peak_nodes)),
        tesla_byte_spread: spread(tesla.map(|r| r.peak_bytes)),
        records,
        full_unroll_fit,
        truncated,
    })
}

pub const CSV_HEADER: &str = "mode,T,B,peak_nodes,peak_bytes,ms_per_iter";

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.mode.as_str(),
            r.t,
            r.b,
            r.peak_nodes,
            r.peak_bytes,
            r.ms_per_iter
        );
    }
    out
}
