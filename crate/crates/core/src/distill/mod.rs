//! Synthetic dataset learning by trajectory matching.

mod engine;
mod io;

pub use engine::{
    checksum_grads, detached_objective, detached_unroll_oracle, full_unroll_oracle, student_iterates, student_unroll, tesla_grad, tesla_step,
    LossDecomposition, MatchProblem, OracleGrad, TeslaGrad, Unroll, DECOMPOSITION_TOL,
};
pub use io::{SYNTHETIC_MAGIC, SYNTHETIC_VERSION};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::binfmt::sha256_hex;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{check_targets, forward_logits_chunked, one_hot, ModelArch, ParamVector};
use crate::tensor::{Element, Tensor};
use crate::trajectory::{TrajectoryStore, DEGENERATE_EPS};

/// Value of the class-index logit when labels are learned.
pub const LEARNED_LOGIT_INIT: f32 = 10.0;
/// Smallest student learning rate a learned β may reach.
pub const BETA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Hard,
    /// Teacher at the segment's target epoch.
    SlaTarget,
    /// Teacher at its final epoch.
    SlaLastEpoch,
    LearnedLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    RealSample,
    Noise,
}

/// `π(i, b)`: synthetic index used at step `i`, slot `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n: usize,
    pub batch: usize,
    pub steps: usize,
    index: Vec<usize>,
}

impl BatchPlan {
    pub fn from_index(n: usize, batch: usize, steps: usize, index: Vec<usize>) -> Result<Self> {
        if index.len() != batch * steps || index.iter().any(|&j| j >= n) || batch == 0 || steps == 0 {
            return Err(Error::Config(format!(
                "plan of {} entries does not fit n={n}, B={batch}, T={steps}",
                index.len()
            )));
        }
        Ok(Self { n, batch, steps, index })
    }

    pub fn step(&self, i: usize) -> &[usize] {
        &self.index[i * self.batch..(i + 1) * self.batch]
    }

    pub fn entries(&self) -> &[usize] {
        &self.index
    }
}

/// Fills the `T·B` slots from consecutive reshuffled permutations of `[0, n)`.
pub fn make_batch_plan<R: Rng>(n: usize, batch: usize, steps: usize, rng: &mut R) -> Result<BatchPlan> {
    if n == 0 || batch == 0 || steps == 0 {
        return Err(Error::Config(format!("batch plan needs positive n, B, T (got {n}, {batch}, {steps})")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pos = n;
    let mut index = Vec::with_capacity(batch * steps);
    for _ in 0..batch * steps {
        if pos == n {
            perm.shuffle(rng);
            pos = 0;
        }
        index.push(perm[pos]);
        pos += 1;
    }
    BatchPlan::from_index(n, batch, steps, index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[n, c, h, w]`, class-major: image `j` belongs to class `j / ipc`.
    pub images: Tensor<f32>,
    pub classes: usize,
    pub ipc: usize,
    pub label_mode: LabelMode,
    /// `[n, classes]` probabilities, or logits for learned labels.
    pub labels: Tensor<f32>,
    pub beta: f64,
    pub zca: Option<String>,
    pub config_hash: Option<String>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_of(&self, j: usize) -> usize {
        j / self.ipc
    }

    pub fn class_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|j| self.class_of(j)).collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Training targets: the labels, passed through softmax when learned.
    pub fn targets(&self) -> Result<Tensor<f32>> {
        match self.label_mode {
            LabelMode::LearnedLogits => Ok(self.labels.softmax_rows()?),
            _ => Ok(self.labels.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.ipc == 0 || self.classes < 2 || n != self.ipc * self.classes {
            return Err(Error::Config(format!(
                "{n} images do not match {} classes x {} ipc",
                self.classes, self.ipc
            )));
        }
        if self.labels.shape() != [n, self.classes] {
            return Err(Error::Shape {
                context: "synthetic labels",
                expected: vec![n, self.classes],
                got: self.labels.shape().to_vec(),
            });
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("student learning rate {} must be positive", self.beta)));
        }
        match self.label_mode {
            LabelMode::Hard => {
                if self.labels != one_hot(&self.class_labels(), self.classes)? {
                    return Err(Error::MalformedTargets {
                        row: 0,
                        reason: "hard labels must be one-hot at the image's class".into(),
                    });
                }
            }
            LabelMode::SlaTarget | LabelMode::SlaLastEpoch => check_targets(&self.labels)?,
            LabelMode::LearnedLogits => {
                if !self.labels.all_finite() {
                    return Err(Error::MalformedTargets {
                        row: 0,
                        reason: "non-finite logits".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Picks `ipc` images per class (without replacement) or unit Gaussian noise,
/// with one-hot labels and the default student learning rate.
pub fn init_synthetic(real: &LabeledDataset, ipc: usize, mode: InitMode, seed: u64) -> Result<SyntheticDataset> {
    if ipc == 0 {
        return Err(Error::Config("ipc must be positive".into()));
    }
    let [c, h, w] = real.image_shape();
    let classes = real.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = match mode {
        InitMode::RealSample => {
            let by_class = real.indices_by_class();
            let mut picks = Vec::with_capacity(ipc * classes);
            for (class, idx) in by_class.iter().enumerate() {
                if idx.len() < ipc {
                    return Err(Error::ClassUndercount {
                        class,
                        have: idx.len(),
                        need: ipc,
                    });
                }
                picks.extend(idx.choose_multiple(&mut rng, ipc).copied());
            }
            real.images.gather_rows(&picks)?
        }
        InitMode::Noise => {
            let numel = ipc * classes * c * h * w;
            Tensor::new(
                vec![ipc * classes, c, h, w],
                (0..numel).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
            )?
        }
    };
    let labels: Vec<usize> = (0..ipc * classes).map(|j| j / ipc).collect();
    Ok(SyntheticDataset {
        images,
        classes,
        ipc,
        label_mode: LabelMode::Hard,
        labels: one_hot(&labels, classes)?,
        beta: 0.01,
        zca: None,
        config_hash: None,
    })
}

/// `softmax(f(θ; X̃))` row-wise; nothing is retained for differentiation.
pub fn assign_soft_labels<F: Element>(
    arch: &ModelArch,
    teacher: &ParamVector<F>,
    images: &Tensor<F>,
) -> Result<Tensor<F>> {
    Ok(forward_logits_chunked(arch, teacher, images, 256)?.softmax_rows()?)
}

/// Logits with [`LEARNED_LOGIT_INIT`] at each image's class, zero elsewhere.
pub fn init_label_logits(n: usize, ipc: usize, classes: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; n * classes];
    for j in 0..n {
        data[j * classes + j / ipc] = LEARNED_LOGIT_INIT;
    }
    Ok(Tensor::new(vec![n, classes], data)?)
}

/// One gradient step on learned label logits.
pub fn learned_labels_step(synthetic: &mut SyntheticDataset, grad: &Tensor<f32>, lr: f64) -> Result<()> {
    if synthetic.label_mode != LabelMode::LearnedLogits {
        return Err(Error::Config("labels are not learned in this mode".into()));
    }
    synthetic.labels.axpy(-lr as f32, grad)?;
    Ok(())
}

fn default_lr_images() -> f64 {
    0.1
}

fn default_image_momentum() -> f64 {
    0.5
}

fn default_beta_init() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub ipc: usize,
    /// `T`: student SGD steps per iteration.
    pub matching_steps: usize,
    /// `M`: teacher epochs spanned by a segment.
    pub expert_epochs: usize,
    /// `K`: outer iterations.
    pub iterations: usize,
    /// Synthetic batch size; `None` uses every image at each step.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub max_start_epoch: usize,
    #[serde(default = "default_lr_images")]
    pub lr_images: f64,
    #[serde(default = "default_image_momentum")]
    pub image_momentum: f64,
    #[serde(default = "default_beta_init")]
    pub beta_init: f64,
    #[serde(default)]
    pub learn_beta: bool,
    #[serde(default)]
    pub lr_beta: f64,
    pub label_mode: LabelMode,
    #[serde(default)]
    pub lr_labels: f64,
    pub init: InitMode,
    #[serde(default)]
    pub augment: AugPolicy,
    /// Keep the initial images; only labels (and β) change.
    #[serde(default)]
    pub freeze_images: bool,
    /// Evaluate every this many iterations (0 disables).
    #[serde(default)]
    pub eval_every: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ipc == 0 || self.matching_steps == 0 || self.expert_epochs == 0 || self.iterations == 0 {
            return bad("ipc, matching_steps, expert_epochs and iterations must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if !(self.beta_init > 0.0) || !self.beta_init.is_finite() {
            return bad(format!("beta_init {} must be positive", self.beta_init));
        }
        for (name, v) in [
            ("lr_images", self.lr_images),
            ("image_momentum", self.image_momentum),
            ("lr_beta", self.lr_beta),
            ("lr_labels", self.lr_labels),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub beta: f64,
    pub grad_norm: f64,
    pub trajectory: usize,
    pub start_epoch: usize,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
    pub decomposition_rel_err: f64,
    pub skipped: bool,
    /// Mean mass on each image's own class under the current labels.
    pub class_mass: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub synthetic: SyntheticDataset,
    pub log: Vec<IterationRecord>,
    pub degenerate: usize,
}

/// Snapshot evaluator called every `eval_every` iterations.
pub type Evaluator<'a> = dyn FnMut(&SyntheticDataset) -> Result<f64> + 'a;

fn class_mass(targets: &Tensor<f32>, ipc: usize) -> f64 {
    let k = targets.shape()[1];
    let n = targets.shape()[0];
    (0..n).map(|j| targets.data()[j * k + j / ipc] as f64).sum::<f64>() / n as f64
}

/// Runs the outer loop: sample a segment, set labels, unroll, compute the
/// image gradient, update.
pub fn distill(
    cfg: &DistillConfig,
    store: &TrajectoryStore,
    real: &LabeledDataset,
    mut evaluator: Option<&mut Evaluator<'_>>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    cfg.augment.validate(real.image_shape())?;
    let arch = store.arch().clone();
    if arch.input != real.image_shape() || arch.classes != real.classes {
        return Err(Error::ArchMismatch {
            expected: arch.name(),
            found: format!("dataset {:?} with {} classes", real.image_shape(), real.classes),
        });
    }
    // fail fast on too-short trajectories
    store.degenerate_pairs(cfg.max_start_epoch, cfg.expert_epochs)?;

    let mut syn = init_synthetic(real, cfg.ipc, cfg.init, cfg.seed)?;
    syn.beta = cfg.beta_init;
    syn.label_mode = cfg.label_mode;
    syn.config_hash = Some(cfg.hash());
    if cfg.label_mode == LabelMode::LearnedLogits {
        syn.labels = init_label_logits(syn.len(), cfg.ipc, syn.classes)?;
    }
    let n = syn.len();
    let batch = cfg.batch_size.unwrap_or(n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut velocity = vec![0.0f32; syn.images.numel()];
    let mut beta_velocity = 0.0f64;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut degenerate = 0usize;

    for it in 0..cfg.iterations {
        let seg = store.sample_segment(cfg.max_start_epoch, cfg.expert_epochs, &mut rng)?;
        let plan = make_batch_plan(n, batch, cfg.matching_steps, &mut rng)?;
        let c_norm = seg.start.dist_sq(seg.target);
        let labels = match cfg.label_mode {
            LabelMode::Hard | LabelMode::LearnedLogits => syn.labels.clone(),
            LabelMode::SlaTarget => assign_soft_labels(&arch, seg.target, &syn.images)?,
            LabelMode::SlaLastEpoch => {
                assign_soft_labels(&arch, store.trajectories[seg.trajectory].final_params(), &syn.images)?
            }
        };
        if matches!(cfg.label_mode, LabelMode::SlaTarget | LabelMode::SlaLastEpoch) {
            syn.labels = labels.clone();
        }
        let mass = class_mass(&syn.targets()?, cfg.ipc);
        let mut record = IterationRecord {
            iteration: it,
            loss: f64::NAN,
            beta: syn.beta,
            grad_norm: 0.0,
            trajectory: seg.trajectory,
            start_epoch: seg.start_epoch,
            peak_nodes: 0,
            peak_bytes: 0,
            decomposition_rel_err: 0.0,
            skipped: false,
            class_mass: mass,
            eval_accuracy: None,
        };
        if !(c_norm >= DEGENERATE_EPS) {
            degenerate += 1;
            record.skipped = true;
            log.push(record);
            if degenerate * 10 > cfg.iterations {
                return Err(Error::TooManyDegenerate {
                    count: degenerate,
                    iterations: cfg.iterations,
                });
            }
            continue;
        }
        let problem = MatchProblem {
            arch: &arch,
            start: seg.start,
            target: seg.target,
            images: &syn.images,
            labels: &labels,
            labels_are_logits: cfg.label_mode == LabelMode::LearnedLogits,
            plan: &plan,
            beta: syn.beta,
            policy: &cfg.augment,
            seed: cfg.seed,
            iteration: it as u64,
        };
        let (_, grad) = tesla_step(&problem)?;
        record.loss = grad.loss;
        record.grad_norm = grad.images.norm_sq().sqrt();
        record.peak_nodes = grad.stats.peak_nodes;
        record.peak_bytes = grad.stats.peak_bytes;
        record.decomposition_rel_err = grad.decomposition.relative_error();

        if !cfg.freeze_images {
            let (mu, lr) = (cfg.image_momentum as f32, cfg.lr_images as f32);
            for ((x, v), &g) in syn.images.data_mut().iter_mut().zip(&mut velocity).zip(grad.images.data()) {
                *v = mu * *v + g;
                *x -= lr * *v;
            }
            if !syn.images.all_finite() {
                return Err(Error::Divergence {
                    context: "iteration",
                    index: it,
                });
            }
        }
        if cfg.learn_beta {
            beta_velocity = cfg.image_momentum * beta_velocity + grad.beta;
            let next = syn.beta - cfg.lr_beta * beta_velocity;
            if !next.is_finite() {
                return Err(Error::Divergence {
                    context: "iteration",
                    index: it,
                });
            }
            syn.beta = next.max(BETA_FLOOR);
        }
        if let Some(lg) = &grad.labels {
            learned_labels_step(&mut syn, lg, cfg.lr_labels)?;
            if !syn.labels.all_finite() {
                return Err(Error::Divergence {
                    context: "iteration",
                    index: it,
                });
            }
        }
        if let Some(eval) = evaluator.as_deref_mut() {
            if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
                let mut snap = syn.clone();
                finalize_labels(&mut snap, cfg, store)?;
                record.eval_accuracy = Some(eval(&snap)?);
            }
        }
        log.push(record);
    }
    finalize_labels(&mut syn, cfg, store)?;
    syn.validate()?;
    Ok(DistillOutcome {
        synthetic: syn,
        log,
        degenerate,
    })
}

/// Labels stored with the result. Soft labels come from the first
/// trajectory: at the latest sampleable target epoch, or its final epoch.
pub fn finalize_labels(syn: &mut SyntheticDataset, cfg: &DistillConfig, store: &TrajectoryStore) -> Result<()> {
    let arch = store.arch();
    let t0 = &store.trajectories[0];
    match cfg.label_mode {
        LabelMode::Hard | LabelMode::LearnedLogits => {}
        LabelMode::SlaTarget => {
            let epoch = (cfg.max_start_epoch + cfg.expert_epochs).min(t0.epochs());
            let teacher = t0.checkpoint(epoch).expect("epoch within trajectory");
            syn.labels = assign_soft_labels(arch, teacher, &syn.images)?;
        }
        LabelMode::SlaLastEpoch => {
            syn.labels = assign_soft_labels(arch, t0.final_params(), &syn.images)?;
        }
    }
    Ok(())
}
