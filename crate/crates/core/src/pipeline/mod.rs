//! Long-recording diarization: chunking, local inference, embeddings,
//! clustering, stitching and grid tuning.

mod ahc;
mod chunk;
mod embed;
mod features;

pub use ahc::{ahc_cluster, distance, merge_clusters, relabel_by_first_appearance, ClusterConfig, Metric};
pub use chunk::{chunk_sequence, seconds_to_frames, Chunk};
pub use embed::{l2_normalize, EmbedKey, Embedder, StatsPoolEmbedder, TableEmbedder};
pub use features::{
    decode_binary, decode_text, encode_binary, encode_text, read_features, write_features, FeatureMatrix,
    FEATURE_MAGIC, FEATURE_VERSION,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::eval::{der, Annotation, DerReport};
use crate::losses::DiarLabels;
use crate::numcore::Tensor;
use crate::synthdata::labels_to_annotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_seconds: f64,
    pub stride_seconds: f64,
    pub binarize_threshold: f64,
    /// Local speakers with fewer active frames get no embedding.
    pub min_active: usize,
    pub cluster: ClusterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 20.0,
            stride_seconds: 20.0,
            binarize_threshold: 0.5,
            min_active: 10,
            cluster: ClusterConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_seconds > 0.0 && self.stride_seconds > 0.0) {
            return Err(Error::Config("chunk_seconds and stride_seconds must be positive".into()));
        }
        check_threshold(self.binarize_threshold)?;
        self.cluster.validate()
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("binarize threshold {t} outside (0, 1)")));
    }
    Ok(())
}

/// A speaker found inside one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSpeaker {
    pub chunk: usize,
    pub local_index: usize,
    pub active_frames: Vec<bool>,
    /// Unit L2 norm.
    pub embedding: Vec<f64>,
}

/// Model speaker probabilities for every chunk, `[T_chunk × K]` each.
pub fn local_probs(model: &Model<f64>, chunks: &[Chunk]) -> Result<Vec<Tensor<f64>>> {
    chunks
        .par_iter()
        .map(|c| model.infer(&c.features).map(|(p, _)| p))
        .collect()
}

pub fn binarize(probs: &Tensor<f64>, threshold: f64) -> DiarLabels {
    let (t, k) = probs.as_matrix_dims();
    let data = probs.data().iter().map(|&p| (p >= threshold) as u8).collect();
    DiarLabels::new(t, k, data).expect("binary data of matching size")
}

/// Thresholded local activity of one chunk.
pub fn local_diarize(chunk: &Chunk, model: &Model<f64>, threshold: f64) -> Result<DiarLabels> {
    check_threshold(threshold)?;
    let (p, _) = model.infer(&chunk.features)?;
    Ok(binarize(&p, threshold))
}

/// One unit-norm embedding per local speaker with at least `min_active` frames.
pub fn extract_embeddings(
    recording_id: &str,
    chunk: &Chunk,
    activity: &DiarLabels,
    embedder: &dyn Embedder,
    min_active: usize,
) -> Result<Vec<LocalSpeaker>> {
    if activity.frames() != chunk.frames() {
        return Err(Error::shape("extract_embeddings", &[activity.frames()], &[chunk.frames()]));
    }
    let mut out = Vec::new();
    for k in 0..activity.speakers() {
        let mask: Vec<bool> = (0..activity.frames()).map(|t| activity.get(t, k) == 1).collect();
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 || n < min_active {
            continue;
        }
        let key = EmbedKey {
            recording_id: recording_id.to_string(),
            chunk: chunk.index,
            local: k,
        };
        let mut embedding = embedder
            .embed(&key, &chunk.features, &mask)
            .and_then(|mut v| l2_normalize(&mut v).map(|_| v))
            .map_err(|e| Error::Data(format!("embedding {} failed: {e}", key.id())))?;
        embedding.shrink_to_fit();
        out.push(LocalSpeaker {
            chunk: chunk.index,
            local_index: k,
            active_frames: mask,
            embedding,
        });
    }
    Ok(out)
}

pub fn global_speaker_name(g: usize) -> String {
    format!("spk{g}")
}

/// Relabels local activity to global clusters on the recording's frame grid.
/// Overlapping chunks are OR-combined per global speaker.
pub fn stitch(
    recording_id: &str,
    total_frames: usize,
    frame_rate: f64,
    chunks: &[Chunk],
    speakers: &[LocalSpeaker],
    assignment: &[usize],
) -> Result<Annotation> {
    if assignment.len() != speakers.len() {
        return Err(Error::Contract(format!(
            "{} local speakers but {} assignments",
            speakers.len(),
            assignment.len()
        )));
    }
    let n_global = assignment.iter().max().map_or(0, |m| m + 1);
    if n_global == 0 {
        return Ok(Annotation::new(recording_id));
    }
    let mut grid = DiarLabels::zeros(total_frames, n_global);
    for (ls, &g) in speakers.iter().zip(assignment) {
        let chunk = chunks
            .get(ls.chunk)
            .ok_or_else(|| Error::Contract(format!("local speaker refers to missing chunk {}", ls.chunk)))?;
        for (t, &on) in ls.active_frames.iter().enumerate() {
            let f = chunk.start_frame + t;
            if on && f < total_frames {
                grid.set(f, g, true);
            }
        }
    }
    Ok(labels_to_annotation(recording_id, &grid, frame_rate, 0.0, &global_speaker_name))
}

/// Frame-grid activity of `speakers` (column order) from an annotation; a frame is
/// active when its centre lies inside a segment.
pub fn annotation_to_labels(ann: &Annotation, speakers: &[String], frame_rate: f64, frames: usize) -> DiarLabels {
    let mut y = DiarLabels::zeros(frames, speakers.len());
    for seg in &ann.segments {
        let Some(k) = speakers.iter().position(|s| *s == seg.speaker) else {
            continue;
        };
        for f in 0..frames {
            let centre = (f as f64 + 0.5) / frame_rate;
            if seg.start <= centre && centre < seg.end {
                y.set(f, k, true);
            }
        }
    }
    y
}

/// Cached per-recording inputs for repeated clustering.
struct Prepared<'a> {
    recording_id: &'a str,
    total_frames: usize,
    frame_rate: f64,
    chunks: Vec<Chunk>,
    probs: Vec<Tensor<f64>>,
}

fn prepare<'a>(
    model: &Model<f64>,
    recording_id: &'a str,
    fm: &FeatureMatrix,
    cfg: &PipelineConfig,
) -> Result<Prepared<'a>> {
    let chunks = chunk_sequence(&fm.features, fm.frame_rate, cfg.chunk_seconds, cfg.stride_seconds)?;
    let probs = local_probs(model, &chunks)?;
    Ok(Prepared {
        recording_id,
        total_frames: fm.features.rows(),
        frame_rate: fm.frame_rate,
        chunks,
        probs,
    })
}

fn local_speakers(p: &Prepared<'_>, embedder: &dyn Embedder, threshold: f64, min_active: usize) -> Result<Vec<LocalSpeaker>> {
    let mut all = Vec::new();
    for (chunk, probs) in p.chunks.iter().zip(&p.probs) {
        let act = binarize(probs, threshold);
        all.extend(extract_embeddings(p.recording_id, chunk, &act, embedder, min_active)?);
    }
    Ok(all)
}

fn cluster_and_stitch(p: &Prepared<'_>, speakers: &[LocalSpeaker], cluster: &ClusterConfig) -> Result<Annotation> {
    if speakers.is_empty() {
        return Ok(Annotation::new(p.recording_id));
    }
    let points: Vec<Vec<f64>> = speakers.iter().map(|s| s.embedding.clone()).collect();
    let assignment = ahc_cluster(&points, cluster)?;
    stitch(p.recording_id, p.total_frames, p.frame_rate, &p.chunks, speakers, &assignment)
}

/// Full inference on one recording.
pub fn diarize(
    model: &Model<f64>,
    embedder: &dyn Embedder,
    recording_id: &str,
    fm: &FeatureMatrix,
    cfg: &PipelineConfig,
) -> Result<Annotation> {
    cfg.validate()?;
    let p = prepare(model, recording_id, fm, cfg)?;
    let speakers = local_speakers(&p, embedder, cfg.binarize_threshold, cfg.min_active)?;
    cluster_and_stitch(&p, &speakers, &cfg.cluster)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneGrid {
    pub binarize_threshold: Vec<f64>,
    pub cluster_threshold: Vec<f64>,
    pub min_cluster_size: Vec<usize>,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e6).round() / 1e6).collect()
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            binarize_threshold: steps(0.3, 0.7, 0.1),
            cluster_threshold: steps(0.3, 1.1, 0.1),
            min_cluster_size: vec![1, 2, 3],
        }
    }
}

/// A recording with features and reference, used for tuning.
#[derive(Debug, Clone)]
pub struct DevRecording {
    pub recording_id: String,
    pub features: FeatureMatrix,
    pub reference: Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub binarize_threshold: f64,
    pub cluster_threshold: f64,
    pub min_cluster_size: usize,
    pub der: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: PipelineConfig,
    pub best_der: f64,
    pub points: Vec<GridPoint>,
}

/// Grid search minimising pooled DER (collar 0) over `dev`. Model outputs are
/// computed once per recording. Ties go to the smallest cluster threshold,
/// then the smallest minimum cluster size, then the smallest binarize threshold.
pub fn tune_hyperparams(
    model: &Model<f64>,
    embedder: &dyn Embedder,
    dev: &[DevRecording],
    base: &PipelineConfig,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    if grid.binarize_threshold.is_empty() || grid.cluster_threshold.is_empty() || grid.min_cluster_size.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("tuning needs at least one dev recording".into()));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let bins = sorted(&grid.binarize_threshold);
    let ths = sorted(&grid.cluster_threshold);
    let mut sizes = grid.min_cluster_size.clone();
    sizes.sort_unstable();
    sizes.dedup();
    for &b in &bins {
        check_threshold(b)?;
    }
    for &t in &ths {
        ClusterConfig { threshold: t, ..base.cluster.clone() }.validate()?;
    }
    if sizes.contains(&0) {
        return Err(Error::Config("min_cluster_size must be >= 1".into()));
    }

    let prepared = dev
        .iter()
        .map(|d| prepare(model, &d.recording_id, &d.features, base))
        .collect::<Result<Vec<_>>>()?;
    // der[b][t][s]
    let mut table = vec![vec![vec![0.0; sizes.len()]; ths.len()]; bins.len()];
    for (bi, &b) in bins.iter().enumerate() {
        let locals = prepared
            .iter()
            .map(|p| local_speakers(p, embedder, b, base.min_active))
            .collect::<Result<Vec<_>>>()?;
        for (ti, &t) in ths.iter().enumerate() {
            for (si, &s) in sizes.iter().enumerate() {
                let cluster = ClusterConfig {
                    threshold: t,
                    min_cluster_size: s,
                    metric: base.cluster.metric,
                };
                let reports = prepared
                    .iter()
                    .zip(&locals)
                    .zip(dev)
                    .map(|((p, l), d)| der(&d.reference, &cluster_and_stitch(p, l, &cluster)?, 0.0))
                    .collect::<Result<Vec<_>>>()?;
                table[bi][ti][si] = DerReport::aggregate(&reports)?.der;
            }
        }
    }

    let mut points = Vec::new();
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (ti, &t) in ths.iter().enumerate() {
        for (si, &s) in sizes.iter().enumerate() {
            for (bi, &b) in bins.iter().enumerate() {
                let v = table[bi][ti][si];
                points.push(GridPoint {
                    binarize_threshold: b,
                    cluster_threshold: t,
                    min_cluster_size: s,
                    der: v,
                });
                if best.map_or(true, |(bv, ..)| v < bv) {
                    best = Some((v, bi, ti, si));
                }
            }
        }
    }
    let (best_der, bi, ti, si) = best.expect("non-empty grid");
    Ok(TuneResult {
        best: PipelineConfig {
            binarize_threshold: bins[bi],
            cluster: ClusterConfig {
                threshold: ths[ti],
                min_cluster_size: sizes[si],
                metric: base.cluster.metric,
            },
            ..base.clone()
        },
        best_der,
        points,
    })
}
