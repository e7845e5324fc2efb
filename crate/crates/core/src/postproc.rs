//! Candidate maps to video-level proposals, and Soft-NMS.

use serde::{Deserialize, Serialize};

use crate::bmn::CandidateMap;
use crate::error::{Error, Result};
use crate::types::{Segment, TimeBase};
use crate::windowing::{localize, Window};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Video-global seconds.
    pub segment: Segment,
    pub score: f64,
    pub source_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub alpha: f64,
    /// Proposals kept per video.
    pub max_keep: usize,
    /// Seconds; scales the selected proposal's duration in the adaptive
    /// overlap threshold.
    pub duration_normalizer_s: f64,
    /// Candidates scoring below this are dropped before NMS.
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            low_threshold: 0.25,
            high_threshold: 0.9,
            alpha: 0.4,
            max_keep: 100,
            // 100 clips of 16 frames at 60 fps
            duration_normalizer_s: 80.0 / 3.0,
            score_floor: 1e-4,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.low_threshold
            && self.low_threshold <= self.high_threshold
            && self.high_threshold <= 1.0
            && self.alpha > 0.0
            && self.duration_normalizer_s > 0.0
            && self.max_keep > 0
            && self.score_floor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "Soft-NMS needs 0 <= low ({}) <= high ({}) <= 1, alpha > 0 ({}), positive normalizer ({}) and max_keep ({})",
                self.low_threshold, self.high_threshold, self.alpha, self.duration_normalizer_s, self.max_keep
            )))
        }
    }

    fn trigger(&self, selected: &Segment) -> f64 {
        self.low_threshold
            + (self.high_threshold - self.low_threshold) * selected.duration() / self.duration_normalizer_s
    }
}

/// One proposal per valid cell, scored `cls * reg`, localized to video
/// seconds and truncated at `video_duration_s`. Cells below `score_floor`
/// and candidates lying entirely in the padded tail are dropped.
pub fn score_candidates(
    cls: &CandidateMap,
    reg: &CandidateMap,
    w: &Window,
    window_index: usize,
    tb: &TimeBase,
    video_duration_s: f64,
    score_floor: f64,
) -> Result<Vec<Proposal>> {
    if cls.values().dim() != reg.values().dim() {
        return Err(Error::Shape(format!(
            "classification map {:?} and regression map {:?} differ",
            cls.values().dim(),
            reg.values().dim()
        )));
    }
    let mut out = Vec::new();
    for (d, s, c) in cls.valid_cells() {
        let score = c * reg.get(d, s);
        if score < score_floor {
            continue;
        }
        let Some(segment) = localize(w, s, d + 1, tb)?.clip_end(video_duration_s) else {
            continue;
        };
        out.push(Proposal {
            segment,
            score,
            source_window: window_index,
        });
    }
    Ok(out)
}

/// Concatenates per-window proposals, highest score first. Equal scores keep
/// their input order.
pub fn pool_windows(per_window: Vec<Vec<Proposal>>) -> Vec<Proposal> {
    let mut all: Vec<Proposal> = per_window.into_iter().flatten().collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all
}

/// Gaussian Soft-NMS with a duration-adaptive trigger.
///
/// Repeatedly selects the best remaining proposal (earliest on ties). Every
/// other remaining proposal whose IoU with it exceeds
/// `low + (high - low) * duration / duration_normalizer_s` is rescored by
/// `exp(-iou^2 / alpha)`. Returns the selections in order, with the scores
/// they had when selected.
pub fn soft_nms(props: &[Proposal], cfg: &NmsConfig) -> Vec<Proposal> {
    let mut remaining = props.to_vec();
    let mut kept = Vec::with_capacity(cfg.max_keep.min(props.len()));
    while kept.len() < cfg.max_keep && !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .fold(0, |bi, (i, p)| if p.score > remaining[bi].score { i } else { bi });
        let sel = remaining.remove(best);
        let trigger = cfg.trigger(&sel.segment);
        for p in remaining.iter_mut() {
            let iou = sel.segment.iou(&p.segment);
            if iou > trigger {
                p.score *= (-iou * iou / cfg.alpha).exp();
            }
        }
        kept.push(sel);
    }
    kept
}
