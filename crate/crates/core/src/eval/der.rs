use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::annotation::Annotation;
use crate::error::{Error, Result};

/// Speaker counts above which the mapping search switches from exhaustive to Hungarian.
pub const EXHAUSTIVE_MAPPING_LIMIT: usize = 8;

/// Error breakdown as fractions of scored reference speech time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub recording_id: String,
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub total_ref_seconds: f64,
    pub miss_seconds: f64,
    pub false_alarm_seconds: f64,
    pub confusion_seconds: f64,
    /// Reference speaker → hypothesis speaker.
    pub speaker_mapping: BTreeMap<String, String>,
}

impl DerReport {
    fn from_seconds(
        recording_id: String,
        total: f64,
        miss: f64,
        fa: f64,
        conf: f64,
        mapping: BTreeMap<String, String>,
    ) -> Result<Self> {
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "recording '{recording_id}' has no scored reference speech; DER is undefined"
            )));
        }
        Ok(Self {
            recording_id,
            der: (miss + fa + conf) / total,
            miss: miss / total,
            false_alarm: fa / total,
            confusion: conf / total,
            total_ref_seconds: total,
            miss_seconds: miss,
            false_alarm_seconds: fa,
            confusion_seconds: conf,
            speaker_mapping: mapping,
        })
    }

    /// Pools reports by summing error and reference times.
    pub fn aggregate(reports: &[DerReport]) -> Result<DerReport> {
        let sum = |f: fn(&DerReport) -> f64| reports.iter().map(f).sum::<f64>();
        Self::from_seconds(
            "ALL".into(),
            sum(|r| r.total_ref_seconds),
            sum(|r| r.miss_seconds),
            sum(|r| r.false_alarm_seconds),
            sum(|r| r.confusion_seconds),
            BTreeMap::new(),
        )
    }
}

/// Which parts of the timeline are scored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoringRegion {
    /// When set, only time inside these intervals counts.
    pub include: Option<Vec<(f64, f64)>>,
    pub exclude: Vec<(f64, f64)>,
}

impl ScoringRegion {
    /// Excludes `±collar/2` around every reference segment boundary.
    pub fn collar(reference: &Annotation, collar: f64) -> Self {
        let half = collar / 2.0;
        let exclude = if collar > 0.0 {
            reference
                .normalized()
                .segments
                .iter()
                .flat_map(|s| [(s.start - half, s.start + half), (s.end - half, s.end + half)])
                .collect()
        } else {
            Vec::new()
        };
        Self {
            include: None,
            exclude,
        }
    }

    /// Scores only within `±radius` of the reference speaker-change points.
    pub fn around_changes(reference: &Annotation, radius: f64) -> Self {
        Self {
            include: Some(
                reference
                    .change_points()
                    .into_iter()
                    .map(|p| (p - radius, p + radius))
                    .collect(),
            ),
            exclude: Vec::new(),
        }
    }

    fn boundaries(&self) -> impl Iterator<Item = f64> + '_ {
        self.include
            .iter()
            .flatten()
            .chain(&self.exclude)
            .flat_map(|&(a, b)| [a, b])
    }

    fn scores(&self, mid: f64) -> bool {
        let inside = |iv: &(f64, f64)| iv.0 <= mid && mid < iv.1;
        self.include.as_ref().map_or(true, |inc| inc.iter().any(inside)) && !self.exclude.iter().any(inside)
    }
}

/// Scores `hyp` against `reference` with a `collar` in seconds (collar 0 scores everything).
pub fn der(reference: &Annotation, hyp: &Annotation, collar: f64) -> Result<DerReport> {
    if !(collar >= 0.0) {
        return Err(Error::Config(format!("collar {collar} must be >= 0")));
    }
    der_in_region(reference, hyp, &ScoringRegion::collar(reference, collar))
}

/// DER restricted to `region`.
pub fn der_in_region(reference: &Annotation, hyp: &Annotation, region: &ScoringRegion) -> Result<DerReport> {
    let r = reference.normalized();
    let h = hyp.normalized();
    let ref_spk = r.speakers();
    let hyp_spk = h.speakers();
    let rix = |s: &str| ref_spk.binary_search_by(|x| x.as_str().cmp(s)).expect("known speaker");
    let hix = |s: &str| hyp_spk.binary_search_by(|x| x.as_str().cmp(s)).expect("known speaker");

    let mut cuts: Vec<f64> = r
        .segments
        .iter()
        .chain(&h.segments)
        .flat_map(|s| [s.start, s.end])
        .chain(region.boundaries())
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // overlap[i][j]: scored time reference speaker i and hypothesis speaker j are both active
    let mut overlap = vec![vec![0.0; hyp_spk.len()]; ref_spk.len()];
    let (mut total, mut miss, mut fa, mut both) = (0.0, 0.0, 0.0, 0.0);
    let mut ract = Vec::new();
    let mut hact = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        if b <= a || !region.scores(mid) {
            continue;
        }
        let dur = b - a;
        ract.clear();
        hact.clear();
        ract.extend(r.segments.iter().filter(|s| s.start <= mid && mid < s.end).map(|s| rix(&s.speaker)));
        hact.extend(h.segments.iter().filter(|s| s.start <= mid && mid < s.end).map(|s| hix(&s.speaker)));
        let (nr, nh) = (ract.len() as f64, hact.len() as f64);
        total += dur * nr;
        miss += dur * (nr - nh).max(0.0);
        fa += dur * (nh - nr).max(0.0);
        both += dur * nr.min(nh);
        for &i in &ract {
            for &j in &hact {
                overlap[i][j] += dur;
            }
        }
    }

    let assignment = best_mapping(&overlap);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| overlap[i][j]))
        .sum();
    let mapping = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (ref_spk[i].clone(), hyp_spk[j].clone())))
        .collect();
    DerReport::from_seconds(reference.recording_id.clone(), total, miss, fa, both - matched, mapping)
}

/// One-to-one assignment maximising total weight; `result[i]` is the column of row `i`.
pub fn best_mapping(w: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows.max(cols) <= EXHAUSTIVE_MAPPING_LIMIT {
        exhaustive_mapping(w, rows, cols)
    } else {
        hungarian_max(w, rows, cols)
    }
}

fn exhaustive_mapping(w: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    fn rec(
        w: &[Vec<f64>],
        i: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        score: f64,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if i == w.len() {
            if score > best.0 {
                *best = (score, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur[i] = Some(j);
                rec(w, i + 1, used, cur, score + w[i][j], best);
                used[j] = false;
            }
        }
        // leaving row i unmatched is only useful when rows outnumber columns
        let matched = cur[..i].iter().filter(|m| m.is_some()).count();
        if w.len() - i > used.len() - matched {
            cur[i] = None;
            rec(w, i + 1, used, cur, score, best);
        }
    }
    let mut best = (f64::NEG_INFINITY, vec![None; rows]);
    rec(w, 0, &mut vec![false; cols], &mut vec![None; rows], 0.0, &mut best);
    best.1
}

/// Hungarian algorithm (shortest augmenting path form) on the square padding of `w`.
fn hungarian_max(w: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| if i < rows && j < cols { -w[i][j] } else { 0.0 };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Scores every reference recording; hypotheses missing for a recording count as empty.
pub fn score_corpus(references: &[Annotation], hyps: &[Annotation], collar: f64) -> Result<(Vec<DerReport>, DerReport)> {
    let by_id: BTreeMap<&str, &Annotation> = hyps.iter().map(|h| (h.recording_id.as_str(), h)).collect();
    if let Some(extra) = hyps
        .iter()
        .find(|h| !references.iter().any(|r| r.recording_id == h.recording_id))
    {
        return Err(Error::Data(format!(
            "hypothesis recording '{}' has no reference",
            extra.recording_id
        )));
    }
    let mut reports = Vec::with_capacity(references.len());
    for r in references {
        let empty = Annotation::new(r.recording_id.clone());
        let h = by_id.get(r.recording_id.as_str()).copied().unwrap_or(&empty);
        reports.push(der(r, h, collar)?);
    }
    let overall = DerReport::aggregate(&reports)?;
    Ok((reports, overall))
}

/// Fixed-width table of per-recording and pooled results, in percent.
pub fn format_table(reports: &[DerReport], overall: &DerReport) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "recording", "ref_sec", "DER%", "miss%", "FA%", "conf%"
    );
    for r in reports.iter().chain(std::iter::once(overall)) {
        out.push_str(&format!(
            "{:<24} {:>10.3} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.recording_id,
            r.total_ref_seconds,
            100.0 * r.der,
            100.0 * r.miss,
            100.0 * r.false_alarm,
            100.0 * r.confusion
        ));
    }
    out
}
