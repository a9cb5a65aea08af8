use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Identifies the local speaker an embedding is requested for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbedKey {
    pub recording_id: String,
    pub chunk: usize,
    pub local: usize,
}

impl EmbedKey {
    /// `recording/chunk/local`, the id format of embedding tables.
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.recording_id, self.chunk, self.local)
    }
}

/// Maps a chunk's features and one speaker's frame mask to a fixed-size vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, key: &EmbedKey, features: &Tensor<f64>, mask: &[bool]) -> Result<Vec<f64>>;
}

/// Concatenated mean and standard deviation of the active frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsPoolEmbedder;

impl Embedder for StatsPoolEmbedder {
    fn embed(&self, key: &EmbedKey, features: &Tensor<f64>, mask: &[bool]) -> Result<Vec<f64>> {
        let (t, d) = features.as_matrix_dims();
        if mask.len() != t {
            return Err(Error::shape("stats_pool", &[mask.len()], &[t]));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Degenerate(format!("{}: no active frames", key.id())));
        }
        let mut mean = vec![0.0; d];
        for r in (0..t).filter(|&r| mask[r]) {
            for (m, x) in mean.iter_mut().zip(features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in (0..t).filter(|&r| mask[r]) {
            for ((v, x), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        mean.extend(var.into_iter().map(|v| (v / n as f64).sqrt()));
        Ok(mean)
    }
}

/// Precomputed vectors looked up by [`EmbedKey::id`].
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    pub table: HashMap<String, Vec<f64>>,
}

impl TableEmbedder {
    /// One entry per line: `<id> <v1> <v2> …`; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id = parts.next().expect("non-empty line").to_string();
            let v = parts
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("'{t}' is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() || dim.is_some_and(|d| d != v.len()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "embedding dimension differs from earlier rows".into(),
                });
            }
            dim = Some(v.len());
            if table.insert(id.clone(), v).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate id {id}"),
                });
            }
        }
        Ok(Self { table })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, key: &EmbedKey, _features: &Tensor<f64>, _mask: &[bool]) -> Result<Vec<f64>> {
        self.table
            .get(&key.id())
            .cloned()
            .ok_or_else(|| Error::Data(format!("no embedding for {}", key.id())))
    }
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Degenerate("cannot normalise a zero or non-finite vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}
