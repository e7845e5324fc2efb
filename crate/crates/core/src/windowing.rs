//! Sliding-window planning over a clip sequence.
//!
//! Windows start on a uniform grid of `stride_clips`. A window running past
//! the end of the sequence is zero-padded rather than shifted back, so window
//! starts never depend on the video length.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClipFeatureSequence, Segment, TimeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub window_len_clips: usize,
    pub stride_clips: usize,
    /// Longest admissible candidate, in clips.
    pub max_duration_clips: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_len_clips: 200,
            stride_clips: 100,
            max_duration_clips: 100,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let Self {
            window_len_clips: l,
            stride_clips: stride,
            max_duration_clips: d,
        } = *self;
        if l == 0 || stride == 0 || d == 0 {
            return Err(Error::Config("window sizes must be positive".into()));
        }
        if d > l {
            return Err(Error::Config(format!(
                "max_duration_clips ({d}) exceeds window_len_clips ({l})"
            )));
        }
        // A segment of length d is covered by some window iff d <= l - stride.
        if d + stride > l {
            return Err(Error::Config(format!(
                "max_duration_clips ({d}) + stride_clips ({stride}) exceeds window_len_clips ({l}); \
                 long segments would not be covered by any window"
            )));
        }
        Ok(())
    }

    pub fn overlap_clips(&self) -> usize {
        self.window_len_clips - self.stride_clips
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_clip: usize,
    pub len_clips: usize,
    /// Trailing clips past the end of the sequence.
    pub pad_clips: usize,
}

impl Window {
    pub fn end_clip(&self) -> usize {
        self.start_clip + self.len_clips
    }

    /// Number of real (unpadded) clips in the window.
    pub fn valid_clips(&self) -> usize {
        self.len_clips - self.pad_clips
    }

    /// The window's full extent in seconds, padding included.
    pub fn span(&self, tb: &TimeBase) -> Segment {
        Segment::new(tb.clip_to_seconds(self.start_clip), tb.clip_to_seconds(self.end_clip()))
            .expect("window length is positive")
    }
}

pub fn plan_windows(num_clips: usize, cfg: &WindowConfig) -> Vec<Window> {
    let num_clips = num_clips.max(1);
    (0..)
        .map(|k| k * cfg.stride_clips)
        .take_while(|&start| start < num_clips)
        .map(|start| Window {
            start_clip: start,
            len_clips: cfg.window_len_clips,
            pad_clips: (start + cfg.window_len_clips).saturating_sub(num_clips),
        })
        .collect()
}

/// Per-window inputs: `L x C` features and `L x V`, `L x Nn` class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSlice {
    pub features: Array2<f64>,
    pub verb_scores: Array2<f64>,
    pub noun_scores: Array2<f64>,
}

pub fn slice_window(seq: &ClipFeatureSequence, w: &Window) -> Result<WindowSlice> {
    let n = seq.num_clips();
    if w.len_clips == 0 || w.start_clip >= n || w.pad_clips != w.end_clip().saturating_sub(n) {
        return Err(Error::Shape(format!(
            "window start {} len {} pad {} does not fit a {n}-clip sequence",
            w.start_clip, w.len_clips, w.pad_clips
        )));
    }
    let rows = w.valid_clips();
    let src = s![w.start_clip..w.start_clip + rows, ..];

    let pad = |m: &Array2<f64>, fill: f64| {
        let mut out = Array2::from_elem((w.len_clips, m.ncols()), fill);
        out.slice_mut(s![..rows, ..]).assign(&m.slice(src));
        out
    };
    Ok(WindowSlice {
        features: pad(&seq.features, 0.0),
        verb_scores: pad(&seq.verb_scores, 1.0 / seq.num_verbs() as f64),
        noun_scores: pad(&seq.noun_scores, 1.0 / seq.num_nouns() as f64),
    })
}

/// Maps a window-local candidate `(start_idx, duration_clips)` to video seconds.
pub fn localize(w: &Window, start_idx: usize, duration_clips: usize, tb: &TimeBase) -> Result<Segment> {
    if duration_clips == 0 || start_idx + duration_clips > w.len_clips {
        return Err(Error::Invalid(format!(
            "candidate ({start_idx}, {duration_clips}) exceeds window length {}",
            w.len_clips
        )));
    }
    let first = w.start_clip + start_idx;
    Segment::new(tb.clip_to_seconds(first), tb.clip_to_seconds(first + duration_clips))
}

/// Inverse of [`localize`] for clip-aligned segments inside the window.
pub fn to_local(w: &Window, seg: &Segment, tb: &TimeBase) -> Option<(usize, usize)> {
    let spc = tb.seconds_per_clip();
    let first = (seg.start() / spc).round();
    let last = (seg.end() / spc).round();
    if first < w.start_clip as f64 || last > w.end_clip() as f64 {
        return None;
    }
    let (first, last) = (first as usize, last as usize);
    (last > first).then(|| (first - w.start_clip, last - first))
}
