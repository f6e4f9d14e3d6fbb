//! Labelled image datasets: IDX and CIFAR binary loaders, the Gaussian
//! "blobs" generator used for desk-scale runs, and ZCA whitening.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binfmt::{sha256_hex, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images `[n, c, h, w]` with integer labels. Loader outputs are in `[0, 1]`;
/// preprocessing (ZCA) may move them out of that range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape {
                context: "dataset images",
                expected: vec![labels.len(), 0, 0, 0],
                got: images.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FormatError::Invalid(format!("label {bad} out of {classes} classes")).into());
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class's images, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.images.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.split,
            format!("{} (subset of {})", self.provenance, indices.len()),
        )
    }

    /// SHA-256 over shape, pixel bytes and labels.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.images.numel() * 4 + self.len() * 8 + 32);
        for d in self.images.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        crate::binfmt::put_f32s(&mut bytes, self.images.data());
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

fn bytes_to_unit(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Parses an IDX image file and label file already read into memory.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(images);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FormatError::BadMagic {
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        }
        .into());
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(FormatError::Invalid(format!("empty IDX dimensions {n}x{rows}x{cols}")).into());
    }
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| FormatError::Invalid("IDX dimensions overflow".into()))?;
    let raw = r.take(pixels)?;

    let mut lr = ByteReader::new(labels);
    let magic = lr.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FormatError::BadMagic {
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        }
        .into());
    }
    let ln = lr.u32_be()? as usize;
    if ln != n {
        return Err(FormatError::CountMismatch(format!("{n} images but {ln} labels")).into());
    }
    let raw_labels = lr.take(ln)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    LabeledDataset::new(
        Tensor::new(vec![n, 1, rows, cols], bytes_to_unit(raw))?,
        labels,
        classes,
        split,
        "idx",
    )
}

/// Loads an IDX image/label file pair (MNIST family).
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let mut ds = parse_idx(&fs::read(images)?, &fs::read(labels)?, split)?;
    ds.provenance = format!("idx:{}", images.display());
    Ok(ds)
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (img, lab) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_idx(&dir.join(img), &dir.join(lab), split)
}

/// Parses concatenated CIFAR-10 binary records: one label byte then the
/// 32x32 R, G and B planes.
pub fn parse_cifar_records(bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(FormatError::CountMismatch(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        ))
        .into());
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(FormatError::Invalid(format!("record {i} has label {label}")).into());
        }
        labels.push(label);
        pixels.extend(bytes_to_unit(&rec[1..]));
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        CIFAR_CLASSES,
        split,
        "cifar10",
    )
}

/// Loads `data_batch_{1..5}.bin` (train) or `test_batch.bin` (test) from a
/// CIFAR-10 binary directory. Missing train batches are skipped.
pub fn load_cifar_binary(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut bytes = Vec::new();
    let mut found = 0;
    for name in &names {
        let p = dir.join(name);
        if p.exists() {
            let chunk = fs::read(&p)?;
            if chunk.len() % CIFAR_RECORD != 0 {
                return Err(FormatError::CountMismatch(format!(
                    "{} has {} bytes, not a multiple of {CIFAR_RECORD}",
                    p.display(),
                    chunk.len()
                ))
                .into());
            }
            bytes.extend(chunk);
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no CIFAR-10 batches in {}", dir.display()),
        )));
    }
    let mut ds = parse_cifar_records(&bytes, split)?;
    ds.provenance = format!("cifar10:{}", dir.display());
    Ok(ds)
}

/// Pixel value = 0.5 + PIXEL_SCALE · z, clamped to [0, 1], where `z` is the
/// sample in noise-σ units.
pub const BLOB_PIXEL_SCALE: f64 = 0.1;

/// Gaussian class templates rendered as images. Each class mean sits on its
/// own orthonormal (spatially smoothed) direction so any two means are
/// exactly `separation` noise standard deviations apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn templates(&self) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = self.shape;
        let d = c * h * w;
        if self.classes < 2 || self.classes > d {
            return Err(Error::Config(format!(
                "blobs need 2..={d} classes, got {}",
                self.classes
            )));
        }
        if !(self.separation >= 0.0) {
            return Err(Error::Config("separation must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        for _ in 0..self.classes {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut v = vec![0.0; d];
            // 3x3 box blur per channel
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    s += raw[(ch * h + yy as usize) * w + xx as usize];
                                }
                            }
                        }
                        v[(ch * h + y) * w + x] = s;
                    }
                }
            }
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
        let radius = self.separation / std::f64::consts::SQRT_2;
        Ok(basis
            .into_iter()
            .map(|b| b.into_iter().map(|v| v * radius).collect())
            .collect())
    }

    pub fn generate(&self, split: Split) -> Result<LabeledDataset> {
        let templates = self.templates()?;
        let per_class = match split {
            Split::Train => self.per_class,
            Split::Test => self.test_per_class,
        };
        if per_class == 0 {
            return Err(Error::Config("blobs need at least one image per class".into()));
        }
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let d: usize = self.shape.iter().product();
        let n = per_class * self.classes;
        let mut pixels = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            labels.push(class);
            for &m in &templates[class] {
                let z: f64 = m + rng.sample::<f64, _>(StandardNormal);
                pixels.push((0.5 + BLOB_PIXEL_SCALE * z).clamp(0.0, 1.0) as f32);
            }
        }
        let [c, h, w] = self.shape;
        LabeledDataset::new(
            Tensor::new(vec![n, c, h, w], pixels)?,
            labels,
            self.classes,
            split,
            format!(
                "blobs(classes={}, sep={}, seed={})",
                self.classes, self.separation, self.seed
            ),
        )
    }
}

/// Training split of a blobs dataset.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    BlobSpec {
        classes,
        per_class,
        test_per_class: per_class,
        shape,
        separation,
        seed,
    }
    .generate(Split::Train)
}

/// `W = E · diag(1/√(λ+ε)) · Eᵀ` fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub epsilon: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d` whitening matrix.
    pub matrix: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Row-major `d x d`, eigenvectors in columns.
    pub eigenvectors: Vec<f64>,
}

pub const DEFAULT_ZCA_EPSILON: f64 = 0.1;

impl ZcaTransform {
    pub fn fit(images: &Tensor<f32>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config("ZCA epsilon must be positive".into()));
        }
        let n = images.shape()[0];
        let d = images.numel() / n;
        let mut mean = vec![0.0; d];
        for row in images.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| images.data()[i * d + j] as f64 - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::try_new(cov, 1e-12, 10_000)
            .ok_or_else(|| Error::Eigen(format!("no convergence for {d}x{d} covariance")))?;
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigen("non-finite eigenvalues".into()));
        }
        let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt());
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
        Ok(Self {
            epsilon,
            mean,
            matrix: row_major(&w),
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: row_major(&eig.eigenvectors),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.matrix)
    }

    /// `(x − mean) W` per image.
    pub fn apply(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.dim();
        let n = images.shape()[0];
        if images.numel() != n * d {
            return Err(Error::Shape {
                context: "zca apply",
                expected: vec![n, d],
                got: images.shape().to_vec(),
            });
        }
        let x = DMatrix::from_fn(n, d, |i, j| images.data()[i * d + j] as f64 - self.mean[j]);
        let y = x * self.matrix();
        Ok(Tensor::new(images.shape().to_vec(), row_major(&y).into_iter().map(|v| v as f32).collect())?)
    }

    /// Maps whitened images back to pixel space with the stored eigensystem.
    pub fn invert(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.dim();
        let n = images.shape()[0];
        if images.numel() != n * d {
            return Err(Error::Shape {
                context: "zca invert",
                expected: vec![n, d],
                got: images.shape().to_vec(),
            });
        }
        let e = DMatrix::from_row_slice(d, d, &self.eigenvectors);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            d,
            self.eigenvalues.iter().map(|l| (l.max(0.0) + self.epsilon).sqrt()),
        ));
        let inv = &e * s * e.transpose();
        let y = DMatrix::from_fn(n, d, |i, j| images.data()[i * d + j] as f64);
        let x = y * inv;
        let mut out = row_major(&x);
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Ok(Tensor::new(images.shape().to_vec(), out.into_iter().map(|v| v as f32).collect())?)
    }

    pub fn apply_dataset(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let mut out = ds.clone();
        out.images = self.apply(&ds.images)?;
        out.provenance = format!("{} + zca(eps={})", ds.provenance, self.epsilon);
        Ok(out)
    }
}

/// Fits ZCA on `dataset` and returns the transform with the whitened data.
pub fn zca_fit_apply(dataset: &LabeledDataset, epsilon: f64) -> Result<(ZcaTransform, LabeledDataset)> {
    let zca = ZcaTransform::fit(&dataset.images, epsilon)?;
    let out = zca.apply_dataset(dataset)?;
    Ok((zca, out))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Sample covariance `(1/n) Σ (x−μ)(x−μ)ᵀ` of flattened images, row-major.
pub fn covariance(images: &Tensor<f32>) -> Vec<f64> {
    let n = images.shape()[0];
    let d = images.numel() / n;
    let mut mean = vec![0.0; d];
    for row in images.data().chunks(d) {
        row.iter().zip(&mut mean).for_each(|(&v, m)| *m += v as f64 / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| images.data()[i * d + j] as f64 - mean[j]);
    row_major(&((x.transpose() * &x) / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend((0..(n * rows * cols) as usize).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_fixture_loads() {
        let ds = parse_idx(&idx_images(4, 28, 28, |i| (i % 256) as u8), &idx_labels(&[0, 3, 9, 1]), Split::Train).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images.shape(), &[4, 1, 28, 28]);
        assert_eq!(ds.labels, vec![0, 3, 9, 1]);
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn idx_full_byte_is_exactly_one() {
        let ds = parse_idx(&idx_images(1, 2, 2, |_| 0xFF), &idx_labels(&[5]), Split::Test).unwrap();
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_errors_are_typed() {
        let imgs = idx_images(4, 28, 28, |_| 7);
        let labels = idx_labels(&[0, 1, 2, 3]);
        let truncated = &imgs[..imgs.len() - 10];
        assert!(matches!(
            parse_idx(truncated, &labels, Split::Train),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = imgs.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx(&bad, &labels, Split::Train), Err(Error::Format(FormatError::BadMagic { .. }))));
        assert!(matches!(
            parse_idx(&imgs, &idx_labels(&[0, 1, 2]), Split::Train),
            Err(Error::Format(FormatError::CountMismatch(_)))
        ));
    }

    fn cifar_record(label: u8, px: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    r.push(px(c, y, x));
                }
            }
        }
        r
    }

    #[test]
    fn cifar_single_record_and_plane_order() {
        let rec = cifar_record(7, |c, y, x| match c {
            0 => (x * 8) as u8,
            1 => (y * 8) as u8,
            _ => 255,
        });
        let ds = parse_cifar_records(&rec, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        let at = |c: usize, y: usize, x: usize| ds.images.data()[(c * 32 + y) * 32 + x];
        assert_eq!(at(0, 5, 3), 24.0 / 255.0);
        assert_eq!(at(1, 5, 3), 40.0 / 255.0);
        assert_eq!(at(2, 9, 9), 1.0);
    }

    #[test]
    fn cifar_errors() {
        let rec = cifar_record(3, |_, _, _| 0);
        assert!(matches!(
            parse_cifar_records(&rec[..3000], Split::Train),
            Err(Error::Format(FormatError::CountMismatch(_)))
        ));
        let bad = cifar_record(10, |_, _, _| 0);
        assert!(matches!(parse_cifar_records(&bad, Split::Train), Err(Error::Format(FormatError::Invalid(_)))));
    }

    #[test]
    fn blobs_counts_and_determinism() {
        let a = make_blobs(3, 200, [1, 8, 8], 5.0, 4).unwrap();
        assert_eq!(a.len(), 600);
        assert_eq!(a.class_counts(), vec![200, 200, 200]);
        let b = make_blobs(3, 200, [1, 8, 8], 5.0, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blob_templates_are_separation_apart() {
        let spec = BlobSpec {
            classes: 4,
            per_class: 1,
            test_per_class: 1,
            shape: [1, 8, 8],
            separation: 5.0,
            seed: 1,
        };
        let t = spec.templates().unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn train_and_test_share_templates() {
        let spec = BlobSpec {
            classes: 3,
            per_class: 300,
            test_per_class: 300,
            shape: [1, 8, 8],
            separation: 6.0,
            seed: 2,
        };
        let tr = spec.generate(Split::Train).unwrap();
        let te = spec.generate(Split::Test).unwrap();
        assert_ne!(tr.images, te.images);
        // class means agree across splits
        let means = |ds: &LabeledDataset| {
            let mut m = vec![vec![0.0f64; 64]; 3];
            for (i, row) in ds.images.data().chunks(64).enumerate() {
                for (a, &v) in m[ds.labels[i]].iter_mut().zip(row) {
                    *a += v as f64 / 300.0;
                }
            }
            m
        };
        let (a, b) = (means(&tr), means(&te));
        for c in 0..3 {
            let d: f64 = a[c].iter().zip(&b[c]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.1, "class {c} means differ by {d}");
        }
    }

    #[test]
    fn zca_of_white_data_is_identity() {
        let d = 6;
        let a = (d as f32).sqrt();
        let mut data = Vec::new();
        for sign in [1.0f32, -1.0] {
            for i in 0..d {
                let mut row = vec![0.0; d];
                row[i] = sign * a;
                data.extend(row);
            }
        }
        let x = Tensor::new(vec![2 * d, 1, 2, 3], data).unwrap();
        let zca = ZcaTransform::fit(&x, 1e-9).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((zca.matrix[i * d + j] - want).abs() < 1e-3);
            }
        }
    }

    fn correlated(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for j in 0..d {
                let v: f64 = (0..d).map(|k| mix[j * d + k] * z[k]).sum();
                data.push((0.5 + 0.1 * v) as f32);
            }
        }
        Tensor::new(vec![n, 1, 4, d / 4], data).unwrap()
    }

    #[test]
    fn zca_whitens_and_is_symmetric() {
        let d = 16;
        let x = correlated(2000, d, 3);
        let (zca, _) = zca_fit_apply(
            &LabeledDataset::new(x.clone(), vec![0; 2000], 1, Split::Train, "t").unwrap(),
            1e-8,
        )
        .unwrap();
        for i in 0..d {
            for j in 0..d {
                assert!((zca.matrix[i * d + j] - zca.matrix[j * d + i]).abs() < 1e-4);
            }
        }
        let cov = covariance(&zca.apply(&x).unwrap());
        let mut err = 0.0;
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                err += (cov[i * d + j] - want).powi(2);
            }
        }
        let rel = err.sqrt() / (d as f64).sqrt();
        assert!(rel < 1e-2, "whitened covariance off by {rel}");
    }

    #[test]
    fn zca_inverse_recovers_inputs() {
        let x = correlated(300, 16, 4);
        let zca = ZcaTransform::fit(&x, 0.1).unwrap();
        let back = zca.invert(&zca.apply(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
