//! Synthetic dataset file: magic, version, JSON metadata, raw images, raw
//! labels, checksum trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{checksum64, put_f32s, verify_trailer, ByteReader};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

use super::{LabelMode, SyntheticDataset};

pub const SYNTHETIC_MAGIC: &[u8; 8] = b"TESLASYN";
pub const SYNTHETIC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMeta {
    pub classes: usize,
    pub ipc: usize,
    /// `[n, c, h, w]`
    pub shape: [usize; 4],
    pub label_mode: LabelMode,
    pub beta: f64,
    pub zca: Option<String>,
    pub config_hash: Option<String>,
}

impl SyntheticDataset {
    pub fn meta(&self) -> SyntheticMeta {
        let s = self.images.shape();
        SyntheticMeta {
            classes: self.classes,
            ipc: self.ipc,
            shape: [s[0], s[1], s[2], s[3]],
            label_mode: self.label_mode,
            beta: self.beta,
            zca: self.zca.clone(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta())?;
        let mut out = Vec::with_capacity(24 + meta.len() + 4 * (self.images.numel() + self.labels.numel()));
        out.extend_from_slice(SYNTHETIC_MAGIC);
        out.extend_from_slice(&SYNTHETIC_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        put_f32s(&mut out, self.images.data());
        put_f32s(&mut out, self.labels.data());
        let sum = checksum64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(SYNTHETIC_MAGIC)?;
        let version = r.u32_le()?;
        if version != SYNTHETIC_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let payload = verify_trailer(bytes)?;
        let mut r = ByteReader::new(&payload[12..]);
        let mlen = r.u32_le()? as usize;
        let meta: SyntheticMeta = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| FormatError::Invalid(format!("metadata: {e}")))?;
        let [n, c, h, w] = meta.shape;
        let numel = [n, c, h, w]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&v| v > 0)
            .ok_or_else(|| FormatError::Invalid(format!("bad image shape {:?}", meta.shape)))?;
        let label_numel = n
            .checked_mul(meta.classes)
            .filter(|&v| v > 0)
            .ok_or_else(|| FormatError::Invalid("bad label shape".into()))?;
        let images = r.f32_le(numel)?;
        let labels = r.f32_le(label_numel)?;
        if r.remaining() != 0 {
            return Err(FormatError::CountMismatch(format!("{} bytes beyond the declared tensors", r.remaining())).into());
        }
        let ds = SyntheticDataset {
            images: Tensor::new(meta.shape.to_vec(), images)?,
            classes: meta.classes,
            ipc: meta.ipc,
            label_mode: meta.label_mode,
            labels: Tensor::new(vec![n, meta.classes], labels)?,
            beta: meta.beta,
            zca: meta.zca,
            config_hash: meta.config_hash,
        };
        ds.validate()
            .map_err(|e| FormatError::Invalid(format!("synthetic dataset: {e}")))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
