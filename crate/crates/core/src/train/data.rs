//! Corpora on disk: a directory of `<recording>.cbmf` feature files (or
//! `<recording>.txt` text features) plus one `reference.rttm`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{parse_rttm, write_rttm, Annotation};
use crate::losses::DiarLabels;
use crate::numcore::Tensor;
use crate::pipeline::{annotation_to_labels, chunk_sequence, read_features, write_features, FeatureMatrix};

pub const REFERENCE_FILE: &str = "reference.rttm";
pub const FEATURE_EXT: &str = "cbmf";

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub features: FeatureMatrix,
    pub reference: Annotation,
}

/// A training example: one chunk of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub features: Tensor<f64>,
    pub labels: DiarLabels,
}

pub fn write_corpus(dir: impl AsRef<Path>, recordings: &[Recording]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in recordings {
        write_features(dir.join(format!("{}.{FEATURE_EXT}", r.id)), &r.features)?;
    }
    let refs: Vec<Annotation> = recordings.iter().map(|r| r.reference.clone()).collect();
    let path = dir.join(REFERENCE_FILE);
    std::fs::write(&path, write_rttm(&refs)).map_err(|e| Error::io(&path, e))
}

fn feature_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some(FEATURE_EXT) | Some("txt")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path.clone()));
            }
        }
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("recording '{}' has two feature files", w[0].0)));
    }
    Ok(files)
}

/// Loads every recording in `dir`, in id order. With `require_reference`, a
/// missing `reference.rttm` is an error; otherwise references default to empty.
pub fn load_corpus(dir: impl AsRef<Path>, require_reference: bool) -> Result<Vec<Recording>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data(format!("corpus directory {} not found", dir.display())));
    }
    let ref_path = dir.join(REFERENCE_FILE);
    let refs = if ref_path.exists() {
        let text = std::fs::read_to_string(&ref_path).map_err(|e| Error::io(&ref_path, e))?;
        parse_rttm(&text)?
    } else if require_reference {
        return Err(Error::Data(format!("{} not found", ref_path.display())));
    } else {
        Vec::new()
    };
    let files = feature_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no feature files in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|(id, path)| {
            let reference = refs
                .iter()
                .find(|a| a.recording_id == id)
                .cloned()
                .unwrap_or_else(|| Annotation::new(id.clone()));
            Ok(Recording {
                features: read_features(&path)?,
                reference,
                id,
            })
        })
        .collect()
}

/// Frame labels for `rec` with columns in sorted speaker order, padded to `num_speakers`.
pub fn recording_labels(rec: &Recording, num_speakers: usize) -> Result<DiarLabels> {
    let mut speakers = rec.reference.speakers();
    if speakers.len() > num_speakers {
        return Err(Error::Data(format!(
            "recording '{}' has {} speakers; the model supports {num_speakers}",
            rec.id,
            speakers.len()
        )));
    }
    // padding columns never match a segment
    speakers.resize(num_speakers, String::new());
    Ok(annotation_to_labels(
        &rec.reference,
        &speakers,
        rec.features.frame_rate,
        rec.features.features.rows(),
    ))
}

/// Splits recordings into chunk-length training items (chunks shorter than 2 frames are dropped).
pub fn make_items(recordings: &[Recording], num_speakers: usize, chunk_seconds: f64) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for rec in recordings {
        let labels = recording_labels(rec, num_speakers)?;
        let fr = rec.features.frame_rate;
        for c in chunk_sequence(&rec.features.features, fr, chunk_seconds, chunk_seconds)? {
            if c.frames() < 2 {
                continue;
            }
            items.push(TrainItem {
                id: format!("{}/{}", rec.id, c.index),
                labels: labels.slice_frames(c.start_frame, c.frames()),
                features: c.features,
            });
        }
    }
    Ok(items)
}
