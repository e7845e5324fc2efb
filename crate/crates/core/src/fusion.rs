//! Labels proposals by sampling the stored per-clip verb/noun scores.
//!
//! Proposal scoring and classification use separate sources: the candidate
//! maps only rank segments, and class labels come from the clip-level
//! classifier outputs saved alongside the features.

use std::fmt;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::Proposal;
use crate::types::{ClipFeatureSequence, Segment, TimeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];

    pub fn name(self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: Segment,
    pub task: Task,
    pub verb_id: Option<usize>,
    pub noun_id: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Sample points per proposal.
    pub k_points: usize,
    /// Detections kept per task and video.
    pub max_keep: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k_points: 10,
            max_keep: 100,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_points == 0 || self.max_keep == 0 {
            return Err(Error::Config("fusion k_points and max_keep must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of the clip score rows at `k_points` bin centres across the segment.
pub fn sample_class_scores(
    clip_scores: ArrayView2<'_, f64>,
    segment: &Segment,
    tb: &TimeBase,
    k_points: usize,
) -> Array1<f64> {
    let n = clip_scores.nrows();
    let mut acc = Array1::zeros(clip_scores.ncols());
    for i in 0..k_points {
        let t = segment.start() + (i as f64 + 0.5) / k_points as f64 * segment.duration();
        acc += &clip_scores.row(tb.clip_at(t, n));
    }
    acc / k_points as f64
}

/// Index and value of the largest entry; the lowest index wins ties.
pub fn argmax(v: &Array1<f64>) -> (usize, f64) {
    v.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, &x)| if x > best.1 { (i, x) } else { best },
    )
}

/// Per-task detections, each list sorted by descending score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskDetections {
    pub verb: Vec<Detection>,
    pub noun: Vec<Detection>,
    pub action: Vec<Detection>,
}

impl TaskDetections {
    pub fn get(&self, task: Task) -> &[Detection] {
        match task {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }
}

pub fn make_detections(props: &[Proposal], seq: &ClipFeatureSequence, cfg: &FusionConfig) -> TaskDetections {
    let mut out = TaskDetections::default();
    for p in props {
        let v = sample_class_scores(seq.verb_scores.view(), &p.segment, &seq.timebase, cfg.k_points);
        let n = sample_class_scores(seq.noun_scores.view(), &p.segment, &seq.timebase, cfg.k_points);
        let (vi, vs) = argmax(&v);
        let (ni, ns) = argmax(&n);
        let det = |task, verb_id, noun_id, score| Detection {
            segment: p.segment,
            task,
            verb_id,
            noun_id,
            score,
        };
        out.verb.push(det(Task::Verb, Some(vi), None, p.score * vs));
        out.noun.push(det(Task::Noun, None, Some(ni), p.score * ns));
        out.action
            .push(det(Task::Action, Some(vi), Some(ni), p.score * vs * ns));
    }
    for list in [&mut out.verb, &mut out.noun, &mut out.action] {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        list.truncate(cfg.max_keep);
    }
    out
}
