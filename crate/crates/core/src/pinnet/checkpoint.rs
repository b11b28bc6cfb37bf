//! Checkpoint layout: magic `PINC1\0`, u32 LE manifest length, the manifest
//! as `key=value` text, then every parameter block in declaration order as
//! f32 LE. Block shapes follow from the network config in the manifest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::kv::{KvError, KvMap};
use crate::micrograd::Tensor;

use super::{Network, NetworkConfig, ParamBlock};

const MAGIC: &[u8; 6] = b"PINC1\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("checkpoint manifest is not UTF-8")]
    Utf8,
    #[error("checkpoint parameters: {0}")]
    Params(String),
}

/// Which target the network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Single { landmark: usize },
    Multi,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelMode::Single { .. } => f.write_str("single"),
            ModelMode::Multi => f.write_str("multi"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    /// Everything needed to interpret and reproduce the weights: network
    /// config, mode, training settings, iteration.
    pub manifest: KvMap,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, mode: ModelMode, extra: &KvMap) -> Self {
        let mut manifest = extra.clone();
        network.config().to_kv(&mut manifest);
        manifest.set("mode", mode);
        if let ModelMode::Single { landmark } = mode {
            manifest.set("landmark", landmark);
        }
        Self { network, manifest }
    }

    pub fn mode(&self) -> Result<ModelMode, CheckpointError> {
        match self.manifest.get_str("mode") {
            Some("single") => Ok(ModelMode::Single { landmark: self.manifest.get("landmark")? }),
            Some("multi") => Ok(ModelMode::Multi),
            Some(other) => Err(KvError::Value {
                key: "mode".into(),
                value: other.into(),
                msg: "expected single or multi".into(),
            }
            .into()),
            None => Err(KvError::Missing("mode".into()).into()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.manifest.get(key)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.manifest.to_string();
        let mut out = Vec::with_capacity(10 + text.len() + 4 * self.network.params().iter().map(|b| b.tensor.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for block in self.network.params() {
            for v in block.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(CheckpointError::Truncated("manifest length".into()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(CheckpointError::Truncated(format!("manifest needs {len} bytes, {} left", rest.len())));
        }
        let text = std::str::from_utf8(&rest[..len]).map_err(|_| CheckpointError::Utf8)?;
        let manifest = KvMap::parse(text)?;
        let config = NetworkConfig::from_kv(&manifest)?;
        let mut floats = rest[len..].chunks_exact(4);
        if !floats.remainder().is_empty() {
            return Err(CheckpointError::Truncated("parameter data is not a whole number of f32".into()));
        }
        let shapes = config.param_shapes();
        let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if floats.len() != expected {
            return Err(CheckpointError::Truncated(format!(
                "expected {expected} parameters, found {}",
                floats.len()
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f32> = floats
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Params(format!("block `{name}` holds non-finite values")));
            }
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Params(e.to_string()))?;
            params.push(ParamBlock { name, tensor });
        }
        let network = Network::from_params(config, params).map_err(|e| CheckpointError::Params(e.to_string()))?;
        Ok(Self { network, manifest })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint.to_bytes())
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
