//! JSON parameter checkpoints: `{version, metadata, params: {path: {shape, data}}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            metadata: BTreeMap::new(),
            params,
        }
    }

    /// Tensors in name order; callers realign them through [`ParamStore::load_values`].
    pub fn to_store<S: Scalar>(&self) -> Result<ParamStore<S>> {
        let mut store = ParamStore::new();
        for (name, st) in &self.params {
            store.add(name.clone(), Tensor::from_f64(&st.shape, &st.data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Elementwise arithmetic mean of checkpoints with identical names and shapes.
    /// Metadata is taken from the last checkpoint.
    pub fn average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
        let last = ckpts
            .last()
            .ok_or_else(|| Error::Contract("averaging needs at least one checkpoint".into()))?;
        let n = ckpts.len() as f64;
        let mut params = BTreeMap::new();
        for (name, st) in &last.params {
            let mut sum = vec![0.0; st.data.len()];
            for c in ckpts {
                let other = c
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("parameter {name} missing from a checkpoint")))?;
                if other.shape != st.shape {
                    return Err(Error::shape("checkpoint average", &st.shape, &other.shape));
                }
                for (s, v) in sum.iter_mut().zip(&other.data) {
                    *s += v;
                }
            }
            sum.iter_mut().for_each(|s| *s /= n);
            params.insert(
                name.clone(),
                StoredTensor {
                    shape: st.shape.clone(),
                    data: sum,
                },
            );
        }
        if ckpts.iter().any(|c| c.params.len() != params.len()) {
            return Err(Error::Data("checkpoints have different parameter sets".into()));
        }
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            metadata: last.metadata.clone(),
            params,
        })
    }
}
