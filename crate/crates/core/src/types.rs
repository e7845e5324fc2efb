//! Time base, temporal segments, and per-video clip data.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a score row lies on the simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Conversion between clip indices and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBase {
    pub fps: f64,
    pub clip_stride_frames: u32,
}

impl Default for TimeBase {
    fn default() -> Self {
        Self {
            fps: 60.0,
            clip_stride_frames: 16,
        }
    }
}

impl TimeBase {
    pub fn new(fps: f64, clip_stride_frames: u32) -> Result<Self> {
        let tb = Self {
            fps,
            clip_stride_frames,
        };
        tb.validate()?;
        Ok(tb)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.clip_stride_frames == 0 {
            return Err(Error::Config("clip_stride_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn seconds_per_clip(&self) -> f64 {
        self.clip_stride_frames as f64 / self.fps
    }

    /// Start time of a clip. Clips are stamped by their first frame.
    pub fn clip_to_seconds(&self, clip_index: usize) -> f64 {
        clip_index as f64 * self.clip_stride_frames as f64 / self.fps
    }

    /// Number of whole clips in a video of `frames` frames; a trailing
    /// partial clip is dropped.
    pub fn clips_for_frames(&self, frames: u64) -> usize {
        (frames / self.clip_stride_frames as u64) as usize
    }

    /// Index of the clip containing time `t`, clamped to `[0, num_clips)`.
    pub fn clip_at(&self, t: f64, num_clips: usize) -> usize {
        debug_assert!(num_clips > 0);
        let idx = (t / self.seconds_per_clip()).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(num_clips - 1)
        }
    }
}

/// A half-open interval `[start_s, end_s)` in seconds with positive length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct Segment {
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    start_s: f64,
    end_s: f64,
}

impl TryFrom<RawSegment> for Segment {
    type Error = Error;
    fn try_from(r: RawSegment) -> Result<Self> {
        Segment::new(r.start_s, r.end_s)
    }
}

impl From<Segment> for RawSegment {
    fn from(s: Segment) -> Self {
        RawSegment {
            start_s: s.start_s,
            end_s: s.end_s,
        }
    }
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && end_s > start_s {
            Ok(Self { start_s, end_s })
        } else {
            Err(Error::InvalidSegment {
                start: start_s,
                end: end_s,
            })
        }
    }

    pub fn start(&self) -> f64 {
        self.start_s
    }

    pub fn end(&self) -> f64 {
        self.end_s
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, other: &Segment) -> bool {
        self.start_s <= other.start_s && other.end_s <= self.end_s
    }

    /// Truncates the segment at `limit_s`; `None` when nothing remains.
    pub fn clip_end(&self, limit_s: f64) -> Option<Segment> {
        Segment::new(self.start_s, self.end_s.min(limit_s)).ok()
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        segment_iou(self, other)
    }
}

/// Temporal intersection over union.
pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.end_s.max(b.end_s) - a.start_s.min(b.start_s);
    inter / union
}

/// Clip features and per-clip verb/noun class scores for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatureSequence {
    pub video_id: String,
    pub features: Array2<f64>,
    pub verb_scores: Array2<f64>,
    pub noun_scores: Array2<f64>,
    pub timebase: TimeBase,
}

impl ClipFeatureSequence {
    /// Validates shapes and score rows, renormalizing each row to sum to one.
    pub fn new(
        video_id: impl Into<String>,
        features: Array2<f64>,
        mut verb_scores: Array2<f64>,
        mut noun_scores: Array2<f64>,
        timebase: TimeBase,
    ) -> Result<Self> {
        timebase.validate()?;
        let (n, c) = features.dim();
        if n == 0 || c == 0 {
            return Err(Error::Shape(format!("feature matrix must be non-empty, got {n}x{c}")));
        }
        for (name, m) in [("verb", &verb_scores), ("noun", &noun_scores)] {
            if m.nrows() != n || m.ncols() == 0 {
                return Err(Error::Shape(format!(
                    "{name} scores are {}x{}, expected {n} rows and at least one class",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        normalize_rows("verb", &mut verb_scores)?;
        normalize_rows("noun", &mut noun_scores)?;
        Ok(Self {
            video_id: video_id.into(),
            features,
            verb_scores,
            noun_scores,
            timebase,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_verbs(&self) -> usize {
        self.verb_scores.ncols()
    }

    pub fn num_nouns(&self) -> usize {
        self.noun_scores.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.timebase.clip_to_seconds(self.num_clips())
    }
}

/// Checks that `row` is a probability vector within [`SIMPLEX_TOLERANCE`].
pub fn check_simplex(row: ArrayView1<'_, f64>) -> std::result::Result<(), String> {
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < -SIMPLEX_TOLERANCE) {
        return Err(format!("entry {v} is negative or non-finite"));
    }
    let sum: f64 = row.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

fn normalize_rows(name: &str, m: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        check_simplex(row.view()).map_err(|e| Error::Invalid(format!("{name} score row {i}: {e}")))?;
        row.mapv_inplace(|v| v.max(0.0));
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(())
}

/// One annotated action instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub segment: Segment,
    pub verb_id: usize,
    pub noun_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub duration_s: f64,
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruth {
    pub fn validate(&self, num_verbs: usize, num_nouns: usize) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.verb_id >= num_verbs || e.noun_id >= num_nouns {
                return Err(Error::Invalid(format!(
                    "{}: entry {i} has class pair ({}, {}) outside {num_verbs} verbs / {num_nouns} nouns",
                    self.video_id, e.verb_id, e.noun_id
                )));
            }
            if e.segment.end() > self.duration_s + 1e-9 {
                return Err(Error::Invalid(format!(
                    "{}: entry {i} ends at {}s past the video duration {}s",
                    self.video_id,
                    e.segment.end(),
                    self.duration_s
                )));
            }
        }
        Ok(())
    }
}
