//! Deterministic synthetic conversations at the feature level.
//!
//! Speakers alternate turns of uniformly drawn length. At each turn change a
//! silence gap may be inserted; otherwise, with probability `min(1, 6·R)`, the
//! next turn starts early and overlaps the current one. The overlap length is
//! steered so the running ratio of overlapped to spoken time tracks the target
//! `R`, and it never exceeds half of either adjacent turn, which caps
//! simultaneous speakers at two. Everything is computed on the frame grid, so
//! labels and the reference annotation agree exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Annotation;
use crate::losses::DiarLabels;
use crate::numcore::Tensor;

pub const MAX_SYNTH_SPEAKERS: usize = 4;

/// Fraction of the estimated maximum overlap ratio a config may request.
const FEASIBILITY_MARGIN: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub recording_id: String,
    pub num_speakers: usize,
    pub feature_dim: usize,
    pub frame_rate: f64,
    pub duration_seconds: f64,
    /// Target overlapped time / speech time.
    pub overlap_ratio: f64,
    pub turn_min_seconds: f64,
    pub turn_max_seconds: f64,
    /// Probability of a silence gap at a turn change.
    pub silence_prob: f64,
    pub silence_min_seconds: f64,
    pub silence_max_seconds: f64,
    pub noise_std: f64,
    /// Seed for the turn timeline and noise.
    pub seed: u64,
    /// Seed for the speaker signatures; `None` reuses `seed`. Sharing it across
    /// recordings gives a corpus a fixed speaker population.
    pub speaker_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            recording_id: "synth".into(),
            num_speakers: 4,
            feature_dim: 64,
            frame_rate: 10.0,
            duration_seconds: 300.0,
            overlap_ratio: 0.15,
            turn_min_seconds: 1.5,
            turn_max_seconds: 6.0,
            silence_prob: 0.2,
            silence_min_seconds: 0.3,
            silence_max_seconds: 1.5,
            noise_std: 0.5,
            seed: 0,
            speaker_seed: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_speakers == 0 || self.num_speakers > MAX_SYNTH_SPEAKERS {
            return cfg_err(format!("num_speakers must be in 1..={MAX_SYNTH_SPEAKERS}"));
        }
        if self.feature_dim == 0 {
            return cfg_err("feature_dim must be positive".into());
        }
        if !(self.frame_rate > 0.0) || !(self.duration_seconds > 0.0) {
            return cfg_err("frame_rate and duration_seconds must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.overlap_ratio) {
            return cfg_err(format!("overlap_ratio {} outside [0, 0.5]", self.overlap_ratio));
        }
        if self.overlap_ratio > 0.0 && self.num_speakers < 2 {
            return cfg_err("overlap needs at least two speakers".into());
        }
        if !(self.turn_min_seconds > 0.0 && self.turn_min_seconds <= self.turn_max_seconds) {
            return cfg_err("need 0 < turn_min_seconds <= turn_max_seconds".into());
        }
        if !(0.0..=1.0).contains(&self.silence_prob)
            || !(self.silence_min_seconds > 0.0 && self.silence_min_seconds <= self.silence_max_seconds)
        {
            return cfg_err("silence_prob must be in [0, 1] and 0 < silence_min <= silence_max".into());
        }
        if !(self.noise_std >= 0.0) {
            return cfg_err("noise_std must be >= 0".into());
        }
        if self.num_frames() == 0 {
            return cfg_err("duration shorter than one frame".into());
        }
        let max = self.max_overlap_ratio();
        if self.overlap_ratio > 0.0 && self.overlap_ratio > FEASIBILITY_MARGIN * max {
            return cfg_err(format!(
                "overlap_ratio {} is infeasible with these turn and silence settings (limit about {:.3})",
                self.overlap_ratio,
                FEASIBILITY_MARGIN * max
            ));
        }
        Ok(())
    }

    /// Probability that a turn change without silence starts an overlap.
    pub fn overlap_prob(&self) -> f64 {
        (6.0 * self.overlap_ratio).min(1.0)
    }

    /// Approximate largest reachable overlap ratio: every eligible turn change
    /// overlapping by its cap of half the shorter adjacent turn.
    pub fn max_overlap_ratio(&self) -> f64 {
        let (a, b) = (self.turn_min_seconds, self.turn_max_seconds);
        let mean_len = 0.5 * (a + b);
        let mean_cap = 0.5 * (a + (b - a) / 3.0);
        let per_turn = (1.0 - self.silence_prob) * self.overlap_prob() * mean_cap;
        per_turn / (mean_len - per_turn)
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_seconds * self.frame_rate).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub features: Tensor<f64>,
    pub labels: DiarLabels,
    pub reference: Annotation,
    pub frame_rate: f64,
}

pub fn speaker_name(k: usize) -> String {
    format!("spk{k}")
}

/// Unit-norm signature vectors, one per speaker.
pub fn speaker_signatures(num_speakers: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED_5EED_5EED);
    (0..num_speakers)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

struct Turn {
    speaker: usize,
    start: usize,
    len: usize,
}

fn draw_frames(rng: &mut ChaCha8Rng, lo: f64, hi: f64, fr: f64) -> usize {
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    ((s * fr).round() as usize).max(1)
}

fn sample_turns(cfg: &SynthConfig, rng: &mut ChaCha8Rng, total: usize) -> Vec<Turn> {
    let fr = cfg.frame_rate;
    let r = cfg.overlap_ratio;
    let q = cfg.overlap_prob();
    let mut turns = vec![Turn {
        speaker: rng.gen_range(0..cfg.num_speakers),
        start: 0,
        len: draw_frames(rng, cfg.turn_min_seconds, cfg.turn_max_seconds, fr),
    }];
    let (mut speech, mut overlap) = (turns[0].len as f64, 0.0);
    loop {
        let prev = turns.last().expect("non-empty");
        let prev_end = prev.start + prev.len;
        if prev_end >= total {
            break;
        }
        let speaker = if cfg.num_speakers == 1 {
            0
        } else {
            let s = rng.gen_range(0..cfg.num_speakers - 1);
            if s >= prev.speaker {
                s + 1
            } else {
                s
            }
        };
        let len = draw_frames(rng, cfg.turn_min_seconds, cfg.turn_max_seconds, fr);
        let start = if rng.gen_bool(cfg.silence_prob) {
            prev_end + draw_frames(rng, cfg.silence_min_seconds, cfg.silence_max_seconds, fr)
        } else if r > 0.0 && rng.gen_bool(q) {
            let wanted = (r * (speech + len as f64) - overlap) / (1.0 + r);
            let cap = prev.len.min(len) / 2;
            let o = ((wanted * rng.gen_range(0.5..1.5)).round().max(0.0) as usize).min(cap);
            overlap += o as f64;
            speech -= o as f64;
            prev_end - o
        } else {
            prev_end
        };
        speech += len as f64;
        turns.push(Turn { speaker, start, len });
    }
    turns
}

/// Generates one recording.
pub fn generate(cfg: &SynthConfig) -> Result<SynthRecording> {
    cfg.validate()?;
    let total = cfg.num_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let turns = sample_turns(cfg, &mut rng, total);

    let mut labels = DiarLabels::zeros(total, cfg.num_speakers);
    for t in &turns {
        for f in t.start..(t.start + t.len).min(total) {
            labels.set(f, t.speaker, true);
        }
    }

    let sig = speaker_signatures(cfg.num_speakers, cfg.feature_dim, cfg.speaker_seed.unwrap_or(cfg.seed));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let d = cfg.feature_dim;
    let mut data = vec![0.0; total * d];
    for f in 0..total {
        let row = &mut data[f * d..(f + 1) * d];
        for (k, v) in sig.iter().enumerate() {
            if labels.get(f, k) == 1 {
                for (x, s) in row.iter_mut().zip(v) {
                    *x += s;
                }
            }
        }
        if cfg.noise_std > 0.0 {
            for x in row.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }

    let reference = labels_to_annotation(&cfg.recording_id, &labels, cfg.frame_rate, 0.0, &speaker_name);
    Ok(SynthRecording {
        features: Tensor::new(&[total, d], data)?,
        labels,
        reference,
        frame_rate: cfg.frame_rate,
    })
}

/// Converts frame activity to segments; consecutive active frames form one segment.
pub fn labels_to_annotation(
    recording_id: &str,
    labels: &DiarLabels,
    frame_rate: f64,
    offset_seconds: f64,
    name: &dyn Fn(usize) -> String,
) -> Annotation {
    let mut ann = Annotation::new(recording_id);
    let t_len = labels.frames();
    for k in 0..labels.speakers() {
        let mut f = 0;
        while f < t_len {
            if labels.get(f, k) == 1 {
                let s = f;
                while f < t_len && labels.get(f, k) == 1 {
                    f += 1;
                }
                ann.push(
                    name(k),
                    offset_seconds + s as f64 / frame_rate,
                    offset_seconds + f as f64 / frame_rate,
                );
            } else {
                f += 1;
            }
        }
    }
    ann.sort();
    ann
}

/// Measured overlapped time / speech time of a label matrix.
pub fn overlap_fraction(labels: &DiarLabels) -> f64 {
    let (mut speech, mut over) = (0usize, 0usize);
    for t in 0..labels.frames() {
        let n = labels.row(t).iter().filter(|&&v| v == 1).count();
        speech += (n >= 1) as usize;
        over += (n >= 2) as usize;
    }
    if speech == 0 {
        0.0
    } else {
        over as f64 / speech as f64
    }
}

/// `count` recordings sharing one speaker population; recording `i` uses seed `base.seed + i`.
pub fn generate_corpus(base: &SynthConfig, count: usize, prefix: &str) -> Result<Vec<SynthRecording>> {
    let speaker_seed = base.speaker_seed.unwrap_or(base.seed);
    (0..count)
        .map(|i| {
            generate(&SynthConfig {
                recording_id: format!("{prefix}{i:03}"),
                seed: base.seed.wrapping_add(i as u64),
                speaker_seed: Some(speaker_seed),
                ..base.clone()
            })
        })
        .collect()
}
