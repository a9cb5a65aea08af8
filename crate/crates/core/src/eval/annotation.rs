use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(speaker: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            speaker: speaker.into(),
            start,
            end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Speaker timeline of one recording.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotation {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl Annotation {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn with_segments(recording_id: impl Into<String>, segments: Vec<Segment>) -> Self {
        Self {
            recording_id: recording_id.into(),
            segments,
        }
    }

    pub fn push(&mut self, speaker: impl Into<String>, start: f64, end: f64) {
        self.segments.push(Segment::new(speaker, start, end));
    }

    /// Distinct speaker labels in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.segments.iter().map(|g| g.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Sorts by (start, speaker, end) — the RTTM output order.
    pub fn sort(&mut self) {
        self.segments.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then_with(|| a.speaker.cmp(&b.speaker))
                .then_with(|| a.end.total_cmp(&b.end))
        });
    }

    /// Merges overlapping or touching segments of the same speaker and drops empty ones.
    pub fn normalized(&self) -> Self {
        let mut by_spk: Vec<Segment> = self
            .segments
            .iter()
            .filter(|s| s.end > s.start)
            .cloned()
            .collect();
        by_spk.sort_by(|a, b| a.speaker.cmp(&b.speaker).then_with(|| a.start.total_cmp(&b.start)));
        let mut out: Vec<Segment> = Vec::with_capacity(by_spk.len());
        for seg in by_spk {
            match out.last_mut() {
                Some(last) if last.speaker == seg.speaker && seg.start <= last.end => {
                    last.end = last.end.max(seg.end);
                }
                _ => out.push(seg),
            }
        }
        let mut ann = Self::with_segments(self.recording_id.clone(), out);
        ann.sort();
        ann
    }

    /// Total speech time, counting overlapping speakers separately.
    pub fn speech_time(&self) -> f64 {
        self.normalized().segments.iter().map(Segment::duration).sum()
    }

    /// Times at which the set of active speakers changes.
    pub fn change_points(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self
            .normalized()
            .segments
            .iter()
            .flat_map(|s| [s.start, s.end])
            .collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }
}
