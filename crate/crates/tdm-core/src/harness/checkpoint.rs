//! Binary checkpoint container.
//!
//! Layout: the magic bytes `TDMC`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the UTF-8 JSON manifest, then every
//! tensor as raw little-endian `f32` values in manifest order. Offsets in
//! the manifest are byte offsets from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, TensorRole};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TDMC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// Trained (or freshly initialized) model with the state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Training steps taken.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerInfo {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub step: u64,
    /// Feature width the TDM blocks were built for.
    pub channels: usize,
    pub alpha: f64,
    pub beta: f64,
    pub noise_amplitude: f64,
    pub optimizer: OptimizerInfo,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// A step-0 checkpoint: initialized model and empty optimizer state.
    pub fn initial(config: &RunConfig) -> Result<Checkpoint> {
        config.validate()?;
        let model = Model::init(
            &config.channel_plan,
            config.seed,
            config.alpha,
            config.beta,
            config.noise_amplitude,
        )?;
        let params: Vec<&Tensor> = model.learnable().into_iter().map(|(_, t)| t).collect();
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params)?;
        Ok(Checkpoint {
            config: config.clone(),
            model,
            optimizer,
            step: 0,
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.model.tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
        let learn = self.model.learnable();
        for (prefix, state) in [("optimizer.m", &self.optimizer.m), ("optimizer.v", &self.optimizer.v)] {
            for ((name, _), t) in learn.iter().zip(state) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let manifest = CheckpointManifest {
            dtype: "f32".into(),
            step: self.step,
            channels: self.model.tdm.channels(),
            alpha: self.model.tdm.alpha,
            beta: self.model.tdm.beta,
            noise_amplitude: self.model.tdm.noise_amplitude,
            optimizer: OptimizerInfo {
                kind: self.optimizer.kind,
                learning_rate: self.optimizer.learning_rate,
                step: self.optimizer.step,
            },
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let truncated = |expected: usize| Error::TruncatedPayload {
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(truncated(HEADER_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(manifest_len)
            .ok_or_else(|| Error::ManifestMismatch("manifest length overflows".into()))?;
        if bytes.len() < payload_start {
            return Err(truncated(payload_start));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::ManifestMismatch(format!("unreadable manifest: {e}")))?;
        if manifest.dtype != "f32" {
            return Err(Error::ManifestMismatch(format!("dtype {}", manifest.dtype)));
        }

        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            if e.offset != expected_offset {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    e.name, e.offset
                )));
            }
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {} has shape {:?}",
                    e.name, e.shape
                )));
            }
            expected_offset += 4 * e.shape.iter().product::<usize>() as u64;
        }
        let expected_len = payload_start + expected_offset as usize;
        if bytes.len() < expected_len {
            return Err(truncated(expected_len));
        }
        if bytes.len() > expected_len {
            return Err(Error::ManifestMismatch(format!(
                "{} trailing bytes after the declared payload",
                bytes.len() - expected_len
            )));
        }

        let config = manifest.config.clone();
        let mut model = Model::init(
            &config.channel_plan,
            0,
            manifest.alpha,
            manifest.beta,
            manifest.noise_amplitude,
        )
        .map_err(|e| Error::ManifestMismatch(format!("config echo: {e}")))?;
        if model.tdm.channels() != manifest.channels {
            return Err(Error::ManifestMismatch(format!(
                "TDM recorded for C = {}, channel plan gives {}",
                manifest.channels,
                model.tdm.channels()
            )));
        }
        let learn_names: Vec<String> = model.learnable().into_iter().map(|(n, _)| n).collect();
        let mut optimizer = Optimizer::new(
            manifest.optimizer.kind,
            manifest.optimizer.learning_rate,
            &model.learnable().into_iter().map(|(_, t)| t).collect::<Vec<_>>(),
        )
        .map_err(|e| Error::ManifestMismatch(format!("optimizer: {e}")))?;
        optimizer.step = manifest.optimizer.step;

        let mut slots: Vec<(String, &mut Tensor)> = model
            .tensors_mut()
            .into_iter()
            .map(|(n, _, t): (String, TensorRole, &mut Tensor)| (n, t))
            .collect();
        for (prefix, state) in [("optimizer.m", &mut optimizer.m), ("optimizer.v", &mut optimizer.v)] {
            for (name, t) in learn_names.iter().zip(state.iter_mut()) {
                slots.push((format!("{prefix}.{name}"), t));
            }
        }
        if slots.len() != manifest.tensors.len() {
            return Err(Error::ManifestMismatch(format!(
                "manifest lists {} tensors, model needs {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        let payload = &bytes[payload_start..];
        for (entry, (name, slot)) in manifest.tensors.iter().zip(slots) {
            if entry.name != name || entry.shape != slot.shape() {
                return Err(Error::ManifestMismatch(format!(
                    "expected {name} {:?}, found {} {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let start = entry.offset as usize;
            let raw = &payload[start..start + 4 * slot.len()];
            for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
