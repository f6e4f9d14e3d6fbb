//! Whole-run configuration, named presets and `key=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugPolicy;
use crate::data::{load_cifar_binary, load_mnist_dir, zca_fit_apply, BlobSpec, LabeledDataset, Split, ZcaTransform};
use crate::distill::{DistillConfig, InitMode, LabelMode};
use crate::error::{Error, Result};
use crate::eval::{BenchFixture, BenchMode, EvalConfig};
use crate::nn::ModelArch;
use crate::trajectory::TeacherConfig;

/// Marker carried by presets that mirror full-scale experiments.
pub const FULL_SCALE_NOTE: &str = "full-scale reference — not desk-runnable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
    },
    /// IDX files as distributed for MNIST and Fashion-MNIST.
    Mnist {
        dir: PathBuf,
        /// Keep at most this many training images per class.
        #[serde(default)]
        per_class_limit: Option<usize>,
    },
    /// The CIFAR-10 binary distribution.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        per_class_limit: Option<usize>,
    },
    /// A dataset this crate does not ingest; kept so full-scale presets
    /// can be inspected and exported.
    Reference { name: String },
}

impl DataSource {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let limit = |ds: LabeledDataset, limit: Option<usize>| -> Result<LabeledDataset> {
            let Some(k) = limit else { return Ok(ds) };
            let keep: Vec<usize> = ds.indices_by_class().iter().flat_map(|idx| idx.iter().take(k).copied()).collect();
            let mut keep = keep;
            keep.sort_unstable();
            ds.subset(&keep)
        };
        match self {
            DataSource::Blobs { spec } => Ok((spec.generate(Split::Train)?, spec.generate(Split::Test)?)),
            DataSource::Mnist { dir, per_class_limit } => Ok((
                limit(load_mnist_dir(dir, Split::Train)?, *per_class_limit)?,
                load_mnist_dir(dir, Split::Test)?,
            )),
            DataSource::Cifar10 { dir, per_class_limit } => Ok((
                limit(load_cifar_binary(dir, Split::Train)?, *per_class_limit)?,
                load_cifar_binary(dir, Split::Test)?,
            )),
            DataSource::Reference { name } => {
                Err(Error::Config(format!("no loader for {name}: {FULL_SCALE_NOTE}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub fixture: BenchFixture,
    pub t_sweep: Vec<usize>,
    pub modes: Vec<BenchMode>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fixture: BenchFixture::convnet(),
            t_sweep: vec![2, 4, 8, 16, 32],
            modes: vec![BenchMode::Tesla, BenchMode::FullUnroll],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    pub data: DataSource,
    /// Whiten inputs with this ZCA regularizer when set.
    #[serde(default)]
    pub zca_epsilon: Option<f64>,
    pub arch: ModelArch,
    pub teacher: TeacherConfig,
    /// Number of teacher trajectories in the store.
    pub trajectories: usize,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Train and test splits with the configured whitening applied, plus
    /// the fitted transform when there is one.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset, Option<ZcaTransform>)> {
        let (train, test) = self.data.load()?;
        match self.zca_epsilon {
            None => Ok((train, test, None)),
            Some(eps) => {
                let (zca, train) = zca_fit_apply(&train, eps)?;
                let test = zca.apply_dataset(&test)?;
                Ok((train, test, Some(zca)))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.distill.validate()?;
        if self.trajectories == 0 {
            return Err(Error::Config("trajectories must be positive".into()));
        }
        if self.teacher.epochs < self.distill.max_start_epoch + self.distill.expert_epochs {
            return Err(Error::Config(format!(
                "teacher epochs {} cannot cover max_start_epoch {} + expert_epochs {}",
                self.teacher.epochs, self.distill.max_start_epoch, self.distill.expert_epochs
            )));
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        Ok(serde_json::from_value(value)?)
    }
}

const SECTIONS: [&str; 5] = ["distill", "teacher", "eval", "bench", "data"];

/// Sets `key` (dotted path, or a bare field name unique across sections)
/// to `raw`, parsed as JSON when possible, as a list when it contains
/// commas, and as a string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let path = resolve_key(root, key)?;
    let mut slot = &mut *root;
    for (i, part) in path.iter().enumerate() {
        let Value::Object(map) = slot else {
            return Err(Error::Config(format!("{key}: {} is not a section", path[..i].join("."))));
        };
        slot = map.entry(part.clone()).or_insert(Value::Null);
    }
    *slot = parse_value(raw);
    Ok(())
}

fn resolve_key(root: &Value, key: &str) -> Result<Vec<String>> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    if key.contains('.') || root.get(key).is_some() {
        return Ok(key.split('.').map(String::from).collect());
    }
    let hits: Vec<&str> = SECTIONS
        .iter()
        .copied()
        .filter(|s| root.get(*s).and_then(|v| v.get(key)).is_some())
        .collect();
    match hits.as_slice() {
        [one] => Ok(vec![one.to_string(), key.to_string()]),
        [] => Err(Error::Config(format!("unknown key {key}"))),
        many => Err(Error::Config(format!("key {key} is ambiguous between {}", many.join(", ")))),
    }
}

fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

pub const PRESET_NAMES: [&str; 14] = [
    "blobs-ipc1",
    "blobs10-sla",
    "tiny-mlp",
    "mnist",
    "cifar10-ipc1",
    "cifar10-ipc10",
    "cifar10-ipc50",
    "cifar100-ipc1",
    "cifar100-ipc10",
    "cifar100-ipc50",
    "imagenet-ipc1",
    "imagenet-ipc2",
    "imagenet-ipc10",
    "imagenet-ipc50",
];

fn desk_eval() -> EvalConfig {
    EvalConfig::default()
}

fn base_distill(ipc: usize, t: usize, m: usize, max_start: usize) -> DistillConfig {
    DistillConfig {
        ipc,
        matching_steps: t,
        expert_epochs: m,
        iterations: 200,
        batch_size: None,
        max_start_epoch: max_start,
        lr_images: 0.1,
        image_momentum: 0.5,
        beta_init: 0.01,
        learn_beta: true,
        lr_beta: 1e-5,
        label_mode: LabelMode::Hard,
        lr_labels: 0.0,
        init: InitMode::RealSample,
        augment: AugPolicy::none(),
        freeze_images: false,
        eval_every: 0,
        seed: 0,
    }
}

/// Three-class blobs distilled to one image per class.
pub fn blobs_ipc1() -> RunConfig {
    let input = [1, 16, 16];
    RunConfig {
        preset: Some("blobs-ipc1".into()),
        note: None,
        data: DataSource::Blobs {
            spec: BlobSpec { classes: 3, per_class: 200, test_per_class: 200, shape: input, separation: 5.0, seed: 0 },
        },
        zca_epsilon: None,
        arch: ModelArch { width: 16, ..ModelArch::convnet(2, 3, input) },
        teacher: TeacherConfig { epochs: 10, lr: 0.01, momentum: 0.9, batch_size: 64, augment: AugPolicy::none(), seed: 100 },
        trajectories: 20,
        distill: DistillConfig { seed: 7, ..base_distill(1, 10, 2, 3) },
        eval: desk_eval(),
        bench: BenchConfig::default(),
    }
}

/// Ten-class blobs with images frozen at real samples and labels taken
/// from the teachers.
pub fn blobs10_sla() -> RunConfig {
    let input = [1, 16, 16];
    RunConfig {
        preset: Some("blobs10-sla".into()),
        note: None,
        data: DataSource::Blobs {
            spec: BlobSpec { classes: 10, per_class: 60, test_per_class: 60, shape: input, separation: 5.0, seed: 0 },
        },
        zca_epsilon: None,
        arch: ModelArch { width: 16, ..ModelArch::convnet(2, 10, input) },
        teacher: TeacherConfig { epochs: 10, lr: 0.1, momentum: 0.9, batch_size: 64, augment: AugPolicy::none(), seed: 100 },
        trajectories: 3,
        distill: DistillConfig {
            iterations: 5,
            learn_beta: false,
            lr_beta: 0.0,
            label_mode: LabelMode::SlaTarget,
            freeze_images: true,
            ..base_distill(1, 10, 2, 2)
        },
        eval: desk_eval(),
        bench: BenchConfig::default(),
    }
}

/// The 20→8→3 MLP on small blobs; runs in seconds.
pub fn tiny_mlp() -> RunConfig {
    let input = [1, 4, 5];
    RunConfig {
        preset: Some("tiny-mlp".into()),
        note: None,
        data: DataSource::Blobs {
            spec: BlobSpec { classes: 3, per_class: 20, test_per_class: 20, shape: input, separation: 5.0, seed: 0 },
        },
        zca_epsilon: None,
        arch: ModelArch::mlp(1, 8, 3, input),
        teacher: TeacherConfig { epochs: 6, lr: 0.05, momentum: 0.9, batch_size: 16, augment: AugPolicy::none(), seed: 100 },
        trajectories: 2,
        distill: DistillConfig { ipc: 2, iterations: 50, ..base_distill(2, 4, 2, 3) },
        eval: EvalConfig { steps: 100, ..desk_eval() },
        bench: BenchConfig { fixture: BenchFixture::tiny(), ..BenchConfig::default() },
    }
}

/// MNIST subset, 100 training images per class, IPC 1.
pub fn mnist() -> RunConfig {
    let input = [1, 28, 28];
    RunConfig {
        preset: Some("mnist".into()),
        note: None,
        data: DataSource::Mnist { dir: PathBuf::from("data/mnist"), per_class_limit: Some(100) },
        zca_epsilon: None,
        arch: ModelArch { width: 32, ..ModelArch::convnet(3, 10, input) },
        teacher: TeacherConfig { epochs: 10, lr: 0.01, momentum: 0.9, batch_size: 64, augment: AugPolicy::none(), seed: 100 },
        trajectories: 10,
        distill: DistillConfig { iterations: 500, ..base_distill(1, 20, 2, 4) },
        eval: desk_eval(),
        bench: BenchConfig::default(),
    }
}

/// One row of the published hyperparameter table.
struct FullScaleRow {
    name: &'static str,
    dataset: &'static str,
    classes: usize,
    depth: usize,
    side: usize,
    ipc: usize,
    t: usize,
    m: usize,
    max_start: usize,
    batch: Option<usize>,
    zca: bool,
    soft: bool,
}

const FULL_SCALE: [FullScaleRow; 10] = [
    FullScaleRow { name: "cifar10-ipc1", dataset: "cifar10", classes: 10, depth: 3, side: 32, ipc: 1, t: 50, m: 2, max_start: 3, batch: None, zca: true, soft: false },
    FullScaleRow { name: "cifar10-ipc10", dataset: "cifar10", classes: 10, depth: 3, side: 32, ipc: 10, t: 30, m: 2, max_start: 20, batch: None, zca: true, soft: false },
    FullScaleRow { name: "cifar10-ipc50", dataset: "cifar10", classes: 10, depth: 3, side: 32, ipc: 50, t: 30, m: 3, max_start: 40, batch: None, zca: false, soft: false },
    FullScaleRow { name: "cifar100-ipc1", dataset: "cifar100", classes: 100, depth: 3, side: 32, ipc: 1, t: 20, m: 3, max_start: 20, batch: None, zca: true, soft: false },
    FullScaleRow { name: "cifar100-ipc10", dataset: "cifar100", classes: 100, depth: 3, side: 32, ipc: 10, t: 15, m: 3, max_start: 30, batch: None, zca: false, soft: false },
    FullScaleRow { name: "cifar100-ipc50", dataset: "cifar100", classes: 100, depth: 3, side: 32, ipc: 50, t: 50, m: 2, max_start: 40, batch: Some(100), zca: true, soft: false },
    FullScaleRow { name: "imagenet-ipc1", dataset: "imagenet-1k-64", classes: 1000, depth: 4, side: 64, ipc: 1, t: 10, m: 3, max_start: 6, batch: Some(100), zca: false, soft: true },
    FullScaleRow { name: "imagenet-ipc2", dataset: "imagenet-1k-64", classes: 1000, depth: 4, side: 64, ipc: 2, t: 15, m: 3, max_start: 10, batch: Some(100), zca: false, soft: true },
    FullScaleRow { name: "imagenet-ipc10", dataset: "imagenet-1k-64", classes: 1000, depth: 4, side: 64, ipc: 10, t: 20, m: 3, max_start: 10, batch: Some(500), zca: false, soft: true },
    FullScaleRow { name: "imagenet-ipc50", dataset: "imagenet-1k-64", classes: 1000, depth: 4, side: 64, ipc: 50, t: 100, m: 3, max_start: 25, batch: Some(500), zca: false, soft: true },
];

fn full_scale(row: &FullScaleRow) -> RunConfig {
    let input = [3, row.side, row.side];
    let data = if row.dataset == "cifar10" {
        DataSource::Cifar10 { dir: PathBuf::from("data/cifar-10-batches-bin"), per_class_limit: None }
    } else {
        DataSource::Reference { name: row.dataset.into() }
    };
    RunConfig {
        preset: Some(row.name.into()),
        note: Some(FULL_SCALE_NOTE.into()),
        data,
        zca_epsilon: row.zca.then_some(crate::data::DEFAULT_ZCA_EPSILON),
        arch: ModelArch::convnet(row.depth, row.classes, input),
        teacher: TeacherConfig {
            epochs: 50,
            augment: AugPolicy::dsa_default(row.side),
            ..TeacherConfig::default()
        },
        trajectories: 100,
        distill: DistillConfig {
            iterations: 5000,
            batch_size: row.batch,
            lr_images: 100.0,
            label_mode: if row.soft { LabelMode::SlaTarget } else { LabelMode::Hard },
            augment: AugPolicy::dsa_default(row.side),
            ..base_distill(row.ipc, row.t, row.m, row.max_start)
        },
        eval: EvalConfig { augment: AugPolicy::dsa_default(row.side), ..desk_eval() },
        bench: BenchConfig::default(),
    }
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "blobs-ipc1" => Some(blobs_ipc1()),
        "blobs10-sla" => Some(blobs10_sla()),
        "tiny-mlp" => Some(tiny_mlp()),
        "mnist" => Some(mnist()),
        _ => FULL_SCALE.iter().find(|r| r.name == name).map(full_scale),
    }
}
