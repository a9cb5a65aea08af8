use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::eval::{format_table, parse_rttm, score_corpus, write_rttm, Annotation, DerReport};
use crate::numcore::Checkpoint;
use crate::pipeline::{diarize, tune_hyperparams, DevRecording, Embedder, StatsPoolEmbedder, TableEmbedder, TuneResult};
use crate::synthdata::{generate_corpus, overlap_fraction, SynthConfig};
use crate::train::{load_corpus, make_items, train, write_corpus, Recording, TrainOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const AVERAGED_FILE: &str = "averaged.json";
pub const TUNE_FILE: &str = "tune.json";
pub const HYPOTHESIS_FILE: &str = "hypothesis.rttm";
pub const DER_JSON_FILE: &str = "der.json";
pub const DER_TABLE_FILE: &str = "der.txt";

/// Process exit status for a failed command: 2 for configuration errors,
/// 3 for bad or missing data, 1 for internal failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Shape { .. } | Error::Contract(_) => 1,
        _ => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(cfg: &RunConfig) -> Result<Model<f64>> {
    let path = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>> {
    Ok(match &cfg.paths.embeddings {
        Some(p) => Box::new(TableEmbedder::load(p)?),
        None => Box::new(StatsPoolEmbedder),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub split: String,
    pub recordings: usize,
    pub seconds: f64,
    pub overlap_fraction: f64,
}

/// Writes `train/`, `dev/` and `test/` corpora under `out`. All splits share
/// one speaker pool; recording seeds are derived from the run seed.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<SynthSummary>> {
    cfg.synth.validate()?;
    let speaker_seed = cfg.synth.speaker_seed.unwrap_or(cfg.seed);
    let splits = [("train", cfg.corpus.train), ("dev", cfg.corpus.dev), ("test", cfg.corpus.test)];
    let mut summary = Vec::new();
    for (s, (name, count)) in splits.into_iter().enumerate() {
        if count == 0 {
            continue;
        }
        let base = SynthConfig {
            seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(100_000 * s as u64),
            speaker_seed: Some(speaker_seed),
            ..cfg.synth.clone()
        };
        let recs = generate_corpus(&base, count, name)?;
        let overlap = recs.iter().map(|r| overlap_fraction(&r.labels)).sum::<f64>() / count as f64;
        let recordings: Vec<Recording> = recs
            .into_iter()
            .map(|r| Recording {
                id: r.reference.recording_id.clone(),
                features: crate::pipeline::FeatureMatrix {
                    features: r.features,
                    frame_rate: r.frame_rate,
                },
                reference: r.reference,
            })
            .collect();
        write_corpus(out.join(name), &recordings)?;
        summary.push(SynthSummary {
            split: name.to_string(),
            recordings: count,
            seconds: count as f64 * cfg.synth.duration_seconds,
            overlap_fraction: overlap,
        });
    }
    Ok(summary)
}

/// Trains on `paths.train`, validating on `paths.dev` when set. Starts from
/// `paths.init_checkpoint` (keeping its model configuration) when given.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_dir = RunConfig::require(&cfg.paths.train, "train")?;
    let train_recs = load_corpus(&train_dir, true)?;
    let dev_recs = match &cfg.paths.dev {
        Some(d) => load_corpus(d, true)?,
        None => Vec::new(),
    };
    let mut model = match &cfg.paths.init_checkpoint {
        Some(p) => {
            let m = Model::from_checkpoint(&Checkpoint::load(p)?)?;
            if m.config != cfg.model {
                log::warn!("using the model configuration stored in {}", p.display());
            }
            m
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let k = model.config.num_speakers;
    let train_items = make_items(&train_recs, k, cfg.train.chunk_seconds)?;
    let dev_items = make_items(&dev_recs, k, cfg.train.chunk_seconds)?;
    log::info!(
        "training on {} items ({} recordings), {} parameters",
        train_items.len(),
        train_recs.len(),
        model.num_params()
    );
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json()?)?;
    train(&mut model, &train_items, &dev_items, &cfg.train, cfg.seed, Some(out))
}

/// `epoch_*.json` files in `dir`, in epoch order.
pub fn epoch_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("epoch_") && name.ends_with(".json") {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Averages the last `n` of `paths` into `out_file`; the metadata records the sources.
pub fn cmd_avg_checkpoints(paths: &[PathBuf], n: usize, out_file: &Path) -> Result<Checkpoint> {
    if n == 0 {
        return Err(Error::Config("number of checkpoints to average must be >= 1".into()));
    }
    if paths.is_empty() {
        return Err(Error::Data("no checkpoints to average".into()));
    }
    let chosen = &paths[paths.len().saturating_sub(n)..];
    let ckpts = chosen.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    let mut avg = Checkpoint::average(&ckpts).map_err(|e| match e {
        Error::Shape { .. } => Error::Data(format!("checkpoints disagree: {e}")),
        other => other,
    })?;
    let sources: Vec<String> = chosen.iter().map(|p| p.display().to_string()).collect();
    avg.metadata.remove("epoch");
    avg.metadata.remove("val_loss");
    avg.metadata.insert("averaged_from".into(), serde_json::to_value(sources)?);
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    avg.save(out_file)?;
    Ok(avg)
}

/// Grid search of the pipeline settings on `paths.dev`; writes `tune.json`.
pub fn cmd_tune(cfg: &RunConfig, out: &Path) -> Result<TuneResult> {
    cfg.pipeline.validate()?;
    let model = load_model(cfg)?;
    let embedder = load_embedder(cfg)?;
    let dev_dir = RunConfig::require(&cfg.paths.dev, "dev")?;
    let dev: Vec<DevRecording> = load_corpus(&dev_dir, true)?
        .into_iter()
        .map(|r| DevRecording {
            recording_id: r.id,
            features: r.features,
            reference: r.reference,
        })
        .collect();
    let result = tune_hyperparams(&model, embedder.as_ref(), &dev, &cfg.pipeline, &cfg.grid)?;
    create_dir(out)?;
    write_text(&out.join(TUNE_FILE), &serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

/// Diarizes every feature file in `paths.test`; writes `hypothesis.rttm`.
pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<Vec<Annotation>> {
    let model = load_model(cfg)?;
    let embedder = load_embedder(cfg)?;
    let pipeline = match &cfg.paths.tuned {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let tuned: TuneResult =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            tuned.best
        }
        None => cfg.pipeline.clone(),
    };
    pipeline.validate()?;
    let input = RunConfig::require(&cfg.paths.test, "test")?;
    let hyps = load_corpus(&input, false)?
        .iter()
        .map(|r| diarize(&model, embedder.as_ref(), &r.id, &r.features, &pipeline))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    write_text(&out.join(HYPOTHESIS_FILE), &write_rttm(&hyps))?;
    Ok(hyps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub collar: f64,
    pub recordings: Vec<DerReport>,
    pub overall: DerReport,
}

fn read_rttm(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&text)
}

/// Scores `paths.hypothesis` against `paths.reference`; writes `der.json` and `der.txt`.
pub fn cmd_score(cfg: &RunConfig, out: &Path) -> Result<ScoreSummary> {
    let refs = read_rttm(&RunConfig::require(&cfg.paths.reference, "reference")?)?;
    let hyps = read_rttm(&RunConfig::require(&cfg.paths.hypothesis, "hypothesis")?)?;
    let (recordings, overall) = score_corpus(&refs, &hyps, cfg.collar)?;
    let summary = ScoreSummary {
        collar: cfg.collar,
        recordings,
        overall,
    };
    create_dir(out)?;
    write_text(&out.join(DER_JSON_FILE), &serde_json::to_string_pretty(&summary)?)?;
    write_text(&out.join(DER_TABLE_FILE), &format_table(&summary.recordings, &summary.overall))?;
    Ok(summary)
}
