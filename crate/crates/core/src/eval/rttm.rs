//! RTTM reading and writing. Only `SPEAKER` records carry segments; other
//! record types are skipped. Times are kept at millisecond resolution.

use std::collections::BTreeMap;

use super::annotation::Annotation;
use crate::error::{Error, Result};

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Parses RTTM text into one annotation per recording, ordered by recording id.
pub fn parse_rttm(text: &str) -> Result<Vec<Annotation>> {
    let mut recs: BTreeMap<String, Annotation> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected at least 8 fields, found {}", fields.len()),
            });
        }
        let num = |idx: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[idx].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("{what} '{}' is not a number", fields[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("{what} is not finite"),
                });
            }
            Ok(v)
        };
        let tbeg = num(3, "onset")?;
        let tdur = num(4, "duration")?;
        if tdur < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("negative duration {tdur}"),
            });
        }
        if tbeg < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("negative onset {tbeg}"),
            });
        }
        let (start, end) = (round_ms(tbeg), round_ms(tbeg + tdur));
        let rec = recs
            .entry(fields[1].to_string())
            .or_insert_with(|| Annotation::new(fields[1]));
        if end > start {
            rec.push(fields[7], start, end);
        }
    }
    Ok(recs.into_values().collect())
}

/// Writes annotations ordered by (recording, start, speaker).
pub fn write_rttm(annotations: &[Annotation]) -> String {
    let mut anns: Vec<&Annotation> = annotations.iter().collect();
    anns.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    let mut out = String::new();
    for ann in anns {
        let mut sorted = ann.clone();
        sorted.sort();
        for s in &sorted.segments {
            out.push_str(&format!(
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>\n",
                ann.recording_id,
                s.start,
                round_ms(s.end) - round_ms(s.start),
                s.speaker
            ));
        }
    }
    out
}
