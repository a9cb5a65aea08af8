//! Training: C-AdamW, the warm-up/plateau schedule, and the epoch loop.

mod data;
mod optim;
mod schedule;

pub use data::{load_corpus, make_items, recording_labels, write_corpus, Recording, TrainItem, FEATURE_EXT, REFERENCE_FILE};
pub use optim::{clip_grad_norm, CAdamW, OptimConfig};
pub use schedule::{EpochOutcome, LrSchedule, ScheduleConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::nn::Ctx;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// Recordings are cut into items of this length.
    pub chunk_seconds: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 16,
            chunk_seconds: 20.0,
            lambda: 0.5,
            gamma: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || !(self.chunk_seconds > 0.0) {
            return Err(Error::Config("batch_size and chunk_seconds must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("lambda and gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_pit: f64,
    pub train_bet: f64,
    pub train_total: f64,
    pub val_pit: f64,
    pub val_bet: f64,
    pub val_total: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// splitmix64 over three words, for independent deterministic streams.
fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    pit: f64,
    bet: f64,
    total: f64,
    batches: usize,
}

impl LossSums {
    fn mean(&self) -> (f64, f64, f64) {
        let n = self.batches.max(1) as f64;
        (self.pit / n, self.bet / n, self.total / n)
    }
}

fn batch_loss(
    model: &Model<f64>,
    ctx: &mut Ctx<f64>,
    batch: &[&TrainItem],
    cfg: &TrainConfig,
) -> Result<crate::losses::TotalLoss> {
    let mut probs = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for item in batch {
        let x = ctx.tape.constant(item.features.clone());
        let out = model.forward(ctx, x)?;
        probs.push(out.probs);
        logits.push(out.change_logits);
        labels.push(item.labels.clone());
    }
    total_loss(&mut ctx.tape, &probs, &logits, &labels, cfg.loss_weights())
}

/// Mean (L_PIT, L_BET, L_total) over `items` in inference mode, batch by batch.
pub fn evaluate_loss(model: &Model<f64>, items: &[TrainItem], cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let mut sums = LossSums::default();
    for batch in items.chunks(cfg.batch_size) {
        let refs: Vec<&TrainItem> = batch.iter().collect();
        let mut ctx = Ctx::new(&model.params);
        let l = batch_loss(model, &mut ctx, &refs, cfg)?;
        sums.pit += ctx.tape.value(l.pit).item();
        sums.bet += ctx.tape.value(l.bet).item();
        sums.total += ctx.tape.value(l.total).item();
        sums.batches += 1;
    }
    Ok(sums.mean())
}

/// One epoch of shuffled mini-batch updates; returns mean training losses.
fn train_epoch(
    model: &mut Model<f64>,
    opt: &mut CAdamW,
    items: &[TrainItem],
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 1)));
    let mut sums = LossSums::default();
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&TrainItem> = idx.iter().map(|&i| &items[i]).collect();
        let mut ctx = Ctx::training(&model.params, model.config.dropout, mix(seed, epoch as u64, 2 + b as u64));
        let l = batch_loss(model, &mut ctx, &batch, cfg)?;
        let (pit, bet, total) = (
            ctx.tape.value(l.pit).item(),
            ctx.tape.value(l.bet).item(),
            ctx.tape.value(l.total).item(),
        );
        if !total.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at epoch {epoch}, batch {b}")));
        }
        let (tape, bound) = ctx.into_parts();
        let mut grads = tape.backward(l.total)?;
        model.params.absorb_grads(&bound, &mut grads);
        clip_grad_norm(&mut model.params, cfg.optim.grad_clip);
        opt.step(&mut model.params, lr)?;
        sums.pit += pit;
        sums.bet += bet;
        sums.total += total;
        sums.batches += 1;
    }
    Ok(sums.mean())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.json")
}

/// Runs the schedule. With `out_dir`, writes one checkpoint per epoch and
/// appends one JSON line per epoch to the metrics log. With no validation
/// items the training loss stands in for the validation loss.
pub fn train(
    model: &mut Model<f64>,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    if val_items.is_empty() {
        log::warn!("no validation items; using the training loss for scheduling");
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut opt = CAdamW::new(cfg.optim.clone(), &model.params);
    let mut sched = LrSchedule::new(cfg.schedule.clone());
    let mut outcome = TrainOutcome {
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    for epoch in 0..cfg.schedule.epochs {
        let lr = sched.lr(epoch);
        let (train_pit, train_bet, train_total) = train_epoch(model, &mut opt, train_items, cfg, lr, seed, epoch)?;
        let (val_pit, val_bet, val_total) = if val_items.is_empty() {
            (train_pit, train_bet, train_total)
        } else {
            evaluate_loss(model, val_items, cfg)?
        };
        let verdict = sched.observe(epoch, val_total);
        let row = EpochMetrics {
            epoch,
            lr,
            train_pit,
            train_bet,
            train_total,
            val_pit,
            val_bet,
            val_total,
            improved: verdict == EpochOutcome::Improved,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_total:.5} (pit {train_pit:.5}, bet {train_bet:.5}) val {val_total:.5}"
        );
        if row.improved {
            outcome.best_epoch = epoch;
        }
        if let Some(dir) = out_dir {
            let mut ckpt = model.to_checkpoint()?;
            ckpt.metadata.insert("epoch".into(), epoch.into());
            ckpt.metadata.insert("val_loss".into(), serde_json::to_value(val_total)?);
            let path = dir.join(checkpoint_name(epoch));
            ckpt.save(&path)?;
            outcome.checkpoints.push(path);
        }
        if let Some((file, path)) = metrics_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&*path, e))?;
        }
        outcome.metrics.push(row);
        if verdict == EpochOutcome::Stop {
            outcome.stopped_early = true;
            break;
        }
    }
    Ok(outcome)
}
