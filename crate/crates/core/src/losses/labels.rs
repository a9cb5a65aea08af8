use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Ratio used when a batch contains no change point.
pub const DEFAULT_POSITIVE_RATIO: f64 = 0.1;

/// Binary speaker activity of one recording, `T × K`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiarLabels {
    frames: usize,
    speakers: usize,
    data: Vec<u8>,
}

impl DiarLabels {
    pub fn new(frames: usize, speakers: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * speakers {
            return Err(Error::shape("diar_labels", &[data.len()], &[frames, speakers]));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("label entry {v} is not 0 or 1")));
        }
        Ok(Self {
            frames,
            speakers,
            data,
        })
    }

    pub fn zeros(frames: usize, speakers: usize) -> Self {
        Self {
            frames,
            speakers,
            data: vec![0; frames * speakers],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Data("ragged label rows".into()));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, t: usize, k: usize) -> u8 {
        self.data[t * self.speakers + k]
    }

    pub fn set(&mut self, t: usize, k: usize, v: bool) {
        self.data[t * self.speakers + k] = v as u8;
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.speakers..(t + 1) * self.speakers]
    }

    /// Column `k` of the result is column `perm[k]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.frames, self.speakers);
        for t in 0..self.frames {
            for (k, &src) in perm.iter().enumerate() {
                out.data[t * self.speakers + k] = self.get(t, src);
            }
        }
        out
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let k = self.speakers;
        Self {
            frames: len,
            speakers: k,
            data: self.data[start * k..(start + len) * k].to_vec(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.data.iter().map(|&v| S::of(v as f64)).collect();
        Tensor::new(&[self.frames, self.speakers], data).expect("shape matches data")
    }
}

/// Per-transition change indicators of one recording, length `T − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeLabels {
    c: Vec<u8>,
}

impl ChangeLabels {
    pub fn new(c: Vec<u8>) -> Result<Self> {
        if let Some(v) = c.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("change label {v} is not 0 or 1")));
        }
        Ok(Self { c })
    }

    pub fn values(&self) -> &[u8] {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.c.iter().filter(|&&v| v == 1).count()
    }
}

/// `c_t = 1` iff some speaker's activity differs between frames `t` and `t+1`.
pub fn derive_change_labels(y: &DiarLabels) -> Result<ChangeLabels> {
    if y.frames < 2 {
        return Err(Error::Contract(format!(
            "change labels need at least 2 frames, got {}",
            y.frames
        )));
    }
    let c = (0..y.frames - 1)
        .map(|t| (y.row(t) != y.row(t + 1)) as u8)
        .collect();
    Ok(ChangeLabels { c })
}

/// Fraction of positive transitions over the batch, or the default when there are none.
pub fn positive_ratio(batch: &[ChangeLabels]) -> f64 {
    let n: usize = batch.iter().map(ChangeLabels::len).sum();
    let p: usize = batch.iter().map(ChangeLabels::positives).sum();
    if p == 0 {
        DEFAULT_POSITIVE_RATIO
    } else {
        p as f64 / n as f64
    }
}
