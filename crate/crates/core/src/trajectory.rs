//! Teacher trajectories: epoch-level parameter checkpoints from SGD on real
//! data, their on-disk format, and a store that samples matching segments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{step_seed, AugPolicy};
use crate::binfmt::{checksum64, put_f32s, verify_trailer, ByteReader};
use crate::data::LabeledDataset;
use crate::error::{Error, FormatError, Result};
use crate::nn::{init_params, one_hot, ModelArch, ParamVector};
use crate::parallel::parallel_map;
use crate::train::{epoch_batches, sgd_step, test_accuracy, Sgd};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"TESLATRJ";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
/// Segments with `‖θ*_t − θ*_{t+M}‖²` at or below this carry no signal.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugPolicy,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            augment: AugPolicy::none(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub params: ParamVector<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub arch: ModelArch,
    pub config: TeacherConfig,
    pub checkpoints: Vec<Checkpoint>,
    pub test_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    arch: ModelArch,
    config: TeacherConfig,
    test_accuracy: Option<f64>,
}

/// Trains one teacher and records a checkpoint at every epoch boundary,
/// epoch 0 being the initialization.
pub fn train_teacher(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    arch: &ModelArch,
    cfg: &TeacherConfig,
) -> Result<Trajectory> {
    if cfg.epochs == 0 {
        return Err(Error::Config("teacher needs at least one epoch".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("teacher batch size must be positive".into()));
    }
    arch.validate()?;
    if train.image_shape() != arch.input || train.classes != arch.classes {
        return Err(Error::ArchMismatch {
            expected: arch.name(),
            found: format!("dataset {:?} with {} classes", train.image_shape(), train.classes),
        });
    }
    cfg.augment.validate(arch.input)?;
    let targets = one_hot::<f32>(&train.labels, train.classes)?;
    let mut params = init_params::<f32>(arch, cfg.seed)?;
    let mut opt = Sgd::new(params.len(), cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut checkpoints = vec![Checkpoint {
        epoch: 0,
        params: params.clone(),
    }];
    for epoch in 1..=cfg.epochs {
        for (b, idx) in epoch_batches(train.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let seed = step_seed(cfg.seed, epoch as u64, b as u64);
            sgd_step(arch, &mut params, &mut opt, &train.images, &targets, idx, &cfg.augment, seed, "epoch", epoch)?;
        }
        checkpoints.push(Checkpoint {
            epoch: epoch as u32,
            params: params.clone(),
        });
    }
    let test_accuracy = match test {
        Some(t) => Some(test_accuracy(arch, &params, &t.images, &t.labels)?),
        None => None,
    };
    Ok(Trajectory {
        arch: arch.clone(),
        config: cfg.clone(),
        checkpoints,
        test_accuracy,
    })
}

impl Trajectory {
    /// Index of the last epoch.
    pub fn epochs(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn checkpoint(&self, epoch: usize) -> Option<&ParamVector<f32>> {
        self.checkpoints.get(epoch).map(|c| &c.params)
    }

    pub fn final_params(&self) -> &ParamVector<f32> {
        &self.checkpoints.last().expect("at least epoch 0").params
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_vec(&Descriptor {
            arch: self.arch.clone(),
            config: self.config.clone(),
            test_accuracy: self.test_accuracy,
        })?;
        let mut out = Vec::with_capacity(32 + desc.len() + self.checkpoints.len() * (12 + 4 * self.arch.param_count()));
        out.extend_from_slice(TRAJECTORY_MAGIC);
        out.extend_from_slice(&TRAJECTORY_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.checkpoints.len() as u32).to_le_bytes());
        for c in &self.checkpoints {
            out.extend_from_slice(&c.epoch.to_le_bytes());
            out.extend_from_slice(&(c.params.len() as u64).to_le_bytes());
            put_f32s(&mut out, c.params.as_slice());
        }
        let sum = checksum64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses a trajectory file. With `expected`, the stored architecture
    /// must match it.
    pub fn decode(bytes: &[u8], expected: Option<&ModelArch>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(TRAJECTORY_MAGIC)?;
        let version = r.u32_le()?;
        if version != TRAJECTORY_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let payload = verify_trailer(bytes)?;
        let mut r = ByteReader::new(&payload[12..]);
        let dlen = r.u32_le()? as usize;
        let desc: Descriptor = serde_json::from_slice(r.take(dlen)?)
            .map_err(|e| FormatError::Invalid(format!("descriptor: {e}")))?;
        desc.arch
            .validate()
            .map_err(|e| FormatError::Invalid(format!("descriptor arch: {e}")))?;
        if let Some(want) = expected {
            if *want != desc.arch {
                return Err(Error::ArchMismatch {
                    expected: want.name(),
                    found: desc.arch.name(),
                });
            }
        }
        let count = r.u32_le()? as usize;
        if count == 0 {
            return Err(FormatError::Invalid("no checkpoints".into()).into());
        }
        let plen = desc.arch.param_count();
        let mut checkpoints = Vec::with_capacity(count.min(r.remaining() / 12 + 1));
        for i in 0..count {
            let epoch = r.u32_le()?;
            if epoch as usize != i {
                return Err(FormatError::Invalid(format!("checkpoint {i} is labelled epoch {epoch}")).into());
            }
            let n = r.u64_le()?;
            if n != plen as u64 {
                return Err(FormatError::CountMismatch(format!(
                    "checkpoint {i} has {n} parameters, architecture has {plen}"
                ))
                .into());
            }
            let values = r.f32_le(plen)?;
            checkpoints.push(Checkpoint {
                epoch,
                params: ParamVector::from_values(&desc.arch, values)?,
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Self {
            arch: desc.arch,
            config: desc.config,
            checkpoints,
            test_accuracy: desc.test_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelArch>) -> Result<Self> {
        Self::decode(&fs::read(path)?, expected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub arch: ModelArch,
    pub dataset_fingerprint: String,
    pub count: usize,
    pub files: Vec<String>,
}

/// A matching segment `(θ*_t, θ*_{t+M})` drawn from the store.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub trajectory: usize,
    pub start_epoch: usize,
    pub start: &'a ParamVector<f32>,
    pub target: &'a ParamVector<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub manifest: StoreManifest,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryStore {
    pub fn new(arch: ModelArch, dataset_fingerprint: String, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(t) = trajectories.iter().find(|t| t.arch != arch) {
            return Err(Error::ArchMismatch {
                expected: arch.name(),
                found: t.arch.name(),
            });
        }
        let files = (0..trajectories.len()).map(|i| format!("trajectory_{i:03}.ttrj")).collect();
        Ok(Self {
            manifest: StoreManifest {
                arch,
                dataset_fingerprint,
                count: trajectories.len(),
                files,
            },
            trajectories,
        })
    }

    /// Trains `count` teachers with seeds `cfg.seed, cfg.seed + 1, …`.
    pub fn build(
        train: &LabeledDataset,
        test: Option<&LabeledDataset>,
        arch: &ModelArch,
        cfg: &TeacherConfig,
        count: usize,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("store needs at least one trajectory".into()));
        }
        let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
        let trajectories = parallel_map(&seeds, |&seed| {
            let c = TeacherConfig { seed, ..cfg.clone() };
            train_teacher(train, test, arch, &c)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Self::new(arch.clone(), train.fingerprint(), trajectories)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.manifest.arch
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (t, name) in self.trajectories.iter().zip(&self.manifest.files) {
            t.save(&dir.join(name))?;
        }
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Loads a saved store. With `fingerprint`, the store must have been
    /// built from that dataset.
    pub fn open(dir: &Path, fingerprint: Option<&str>) -> Result<Self> {
        let manifest: StoreManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?)?;
        if manifest.count != manifest.files.len() {
            return Err(FormatError::CountMismatch(format!(
                "manifest lists {} files but claims {}",
                manifest.files.len(),
                manifest.count
            ))
            .into());
        }
        if let Some(fp) = fingerprint {
            if fp != manifest.dataset_fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: manifest.dataset_fingerprint,
                    found: fp.to_string(),
                });
            }
        }
        let mut trajectories = Vec::with_capacity(manifest.count);
        for name in &manifest.files {
            let path: PathBuf = dir.join(name);
            if !path.exists() {
                return Err(FormatError::CountMismatch(format!("manifest file {name} is missing")).into());
            }
            trajectories.push(Trajectory::load(&path, Some(&manifest.arch))?);
        }
        Ok(Self { manifest, trajectories })
    }

    fn check_span(&self, max_start: usize, m: usize) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Config("trajectory store is empty".into()));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if max_start + m > t.epochs() {
                return Err(Error::InsufficientEpochs {
                    trajectory: i,
                    epochs: t.epochs(),
                    needed: max_start + m,
                });
            }
        }
        Ok(())
    }

    /// Uniform over trajectory and start epoch `t ∈ [0, max_start]`.
    pub fn sample_segment<R: Rng>(&self, max_start: usize, m: usize, rng: &mut R) -> Result<Segment<'_>> {
        self.check_span(max_start, m)?;
        let trajectory = rng.random_range(0..self.trajectories.len() as u64) as usize;
        let start_epoch = rng.random_range(0..=max_start as u64) as usize;
        let t = &self.trajectories[trajectory];
        Ok(Segment {
            trajectory,
            start_epoch,
            start: &t.checkpoints[start_epoch].params,
            target: &t.checkpoints[start_epoch + m].params,
        })
    }

    /// Sampleable `(trajectory, start)` pairs whose teacher displacement
    /// is at most [`DEGENERATE_EPS`].
    pub fn degenerate_pairs(&self, max_start: usize, m: usize) -> Result<Vec<(usize, usize)>> {
        self.check_span(max_start, m)?;
        let mut out = Vec::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            for s in 0..=max_start {
                if t.checkpoints[s].params.dist_sq(&t.checkpoints[s + m].params) <= DEGENERATE_EPS {
                    out.push((i, s));
                }
            }
        }
        Ok(out)
    }
}
