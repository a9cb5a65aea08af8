use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// A window of a recording's features.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub index: usize,
    pub start_frame: usize,
    pub features: Tensor<f64>,
    pub frame_rate: f64,
}

impl Chunk {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn start(&self) -> f64 {
        self.start_frame as f64 / self.frame_rate
    }

    pub fn end(&self) -> f64 {
        (self.start_frame + self.frames()) as f64 / self.frame_rate
    }
}

pub fn seconds_to_frames(seconds: f64, frame_rate: f64) -> usize {
    (seconds * frame_rate).round() as usize
}

/// Windows of `chunk_seconds` every `stride_seconds`, until a window reaches the end.
/// The last window may be shorter.
pub fn chunk_sequence(
    features: &Tensor<f64>,
    frame_rate: f64,
    chunk_seconds: f64,
    stride_seconds: f64,
) -> Result<Vec<Chunk>> {
    if !(chunk_seconds > 0.0 && stride_seconds > 0.0 && frame_rate > 0.0) {
        return Err(Error::Config("chunk length, stride and frame rate must be positive".into()));
    }
    let total = features.rows();
    if features.len() == 0 || total == 0 {
        return Err(Error::Data("cannot chunk an empty recording".into()));
    }
    let len = seconds_to_frames(chunk_seconds, frame_rate).max(1);
    let stride = seconds_to_frames(stride_seconds, frame_rate).max(1);
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let n = len.min(total - start);
        chunks.push(Chunk {
            index: chunks.len(),
            start_frame: start,
            features: features.slice_rows(start, n)?,
            frame_rate,
        });
        if start + len >= total {
            return Ok(chunks);
        }
        start += stride;
    }
}
