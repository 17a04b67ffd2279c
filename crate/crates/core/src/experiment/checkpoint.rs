//! Checkpoint files: `BICK`, a version word, a length-prefixed TOML manifest,
//! then every named tensor as little-endian `f32` in manifest order.

use super::config::RunConfig;
use crate::alignment::Model;
use crate::error::{Error, Result};
use crate::features::ByteReader;
use crate::scalar::Scalar;
use crate::transforms::View;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BICK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub views: Vec<String>,
    pub view_count: usize,
    pub view_dim: usize,
    pub neural_dim: usize,
    pub latent_dim: usize,
    pub epochs_trained: usize,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    /// Tensor values in manifest order.
    pub values: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, config: &RunConfig, epochs_trained: usize) -> Self {
        let views = config.views();
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        for (name, shape, data) in model.tensors() {
            tensors.push(TensorEntry { name, shape });
            values.push(data.iter().map(|v| v.as_f64() as f32).collect());
        }
        Self {
            manifest: CheckpointManifest {
                view_count: views.len(),
                views: views.iter().map(|v| v.name().to_string()).collect(),
                view_dim: model.fusion.view_dim(),
                neural_dim: model.neural.in_dim(),
                latent_dim: model.fusion.latent_dim(),
                epochs_trained,
                config_hash: config.hash(),
                tensors,
                config: config.clone(),
            },
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = toml::to_string(&self.manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
        let manifest: CheckpointManifest =
            toml::from_str(header).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.f32()?);
            }
            values.push(v);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Self { manifest, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn views(&self) -> Result<Vec<View>> {
        self.manifest
            .views
            .iter()
            .map(|name| {
                View::ALL
                    .into_iter()
                    .find(|v| v.name() == name)
                    .ok_or_else(|| Error::Format(format!("unknown view {name:?} in checkpoint")))
            })
            .collect()
    }

    /// Rebuilds a model shaped by `config`, filling every tensor from the
    /// checkpoint by name.
    pub fn to_model<T: Scalar>(&self, config: &RunConfig) -> Result<Model<T>> {
        let m = &self.manifest;
        for (what, stored, wanted) in [
            ("view feature dim", m.view_dim, config.features.dim),
            ("neural dim", m.neural_dim, config.data.neural_dim),
            ("latent dim", m.latent_dim, config.fusion.latent_dim),
        ] {
            if stored != wanted {
                return Err(Error::Config(format!(
                    "checkpoint {what} is {stored} but the config asks for {wanted}"
                )));
            }
        }
        let mut model = Model::<T>::init(
            config.features.dim,
            config.data.neural_dim,
            &config.fusion,
            config.alignment.temperature,
            0,
        )?;
        let layout: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), slot) in layout.iter().zip(model.tensors_mut()) {
            let idx = m.tensors.iter().position(|t| &t.name == name).ok_or_else(|| {
                Error::Config(format!("checkpoint has no tensor {name} required by the config"))
            })?;
            if &m.tensors[idx].shape != shape {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, config shape {shape:?}",
                    m.tensors[idx].shape
                )));
            }
            for (dst, &src) in slot.iter_mut().zip(&self.values[idx]) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(model)
    }
}
