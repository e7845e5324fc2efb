use ndarray::Array2;

use super::{BmnConfig, CandidateMap};
use crate::types::{GroundTruthEntry, Segment, TimeBase};
use crate::windowing::{localize, Window};

/// Regression targets: each valid candidate's best temporal IoU against any
/// ground-truth segment.
pub fn compute_giou_map(w: &Window, gts: &[GroundTruthEntry], cfg: &BmnConfig, tb: &TimeBase) -> CandidateMap {
    let span = w.span(tb);
    // only segments that touch the window can score above zero
    let near: Vec<Segment> = gts
        .iter()
        .map(|g| g.segment)
        .filter(|g| g.end() > span.start() && g.start() < span.end())
        .collect();
    let mut values = Array2::zeros((cfg.max_duration, cfg.window_len));
    if near.is_empty() {
        return CandidateMap::from_values(values);
    }
    for ((d, s), v) in values.indexed_iter_mut() {
        if !cfg.is_valid_candidate(d, s) {
            continue;
        }
        let cand = localize(w, s, d + 1, tb).expect("valid candidate fits the window");
        *v = near.iter().map(|g| cand.iou(g)).fold(0.0, f64::max);
    }
    CandidateMap::from_values(values)
}
