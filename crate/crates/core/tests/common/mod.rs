//! Reference implementations used as oracles by the integration tests.
//! Nothing here calls into the code path it checks.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;
use tad_core::bmn::{loss_and_grad, CandidateMap, LossConfig, ModelParams, SamplingWeights};
use tad_core::eval::{ClassCounts, VideoDetections};
use tad_core::fusion::{Detection, Task};
use tad_core::postproc::{NmsConfig, Proposal};
use tad_core::{GroundTruth, GroundTruthEntry, Segment};

/// Candidate features by interpolating the hidden sequence directly at each
/// sample point `s + j (d + 1) / (N_s - 1)`.
pub fn naive_candidate_features(hidden: &Array2<f64>, max_duration: usize, num_samples: usize) -> Array4<f64> {
    let (l, h) = hidden.dim();
    let mut out = Array4::zeros((max_duration, l, num_samples, h));
    for d in 0..max_duration {
        for s in 0..l {
            if s + d + 1 > l {
                continue;
            }
            for j in 0..num_samples {
                let p = s as f64 + j as f64 * (d + 1) as f64 / (num_samples - 1) as f64;
                let lo = p.floor() as usize;
                let frac = p - p.floor();
                for c in 0..h {
                    let v = if lo >= l - 1 {
                        hidden[[l - 1, c]]
                    } else {
                        (1.0 - frac) * hidden[[lo, c]] + frac * hidden[[lo + 1, c]]
                    };
                    out[[d, s, j, c]] = v;
                }
            }
        }
    }
    out
}

fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.1.min(b.1) - a.0.max(b.0);
    if inter <= 0.0 {
        0.0
    } else {
        inter / (a.1.max(b.1) - a.0.min(b.0))
    }
}

/// Quadratic Soft-NMS over parallel arrays with an alive mask.
pub fn reference_soft_nms(props: &[Proposal], cfg: &NmsConfig) -> Vec<Proposal> {
    let spans: Vec<(f64, f64)> = props.iter().map(|p| (p.segment.start(), p.segment.end())).collect();
    let mut scores: Vec<f64> = props.iter().map(|p| p.score).collect();
    let mut alive = vec![true; props.len()];
    let mut out = Vec::new();
    while out.len() < cfg.max_keep {
        let mut best: Option<usize> = None;
        for i in 0..props.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        let mut chosen = props[b];
        chosen.score = scores[b];
        out.push(chosen);
        let width = spans[b].1 - spans[b].0;
        let threshold =
            cfg.low_threshold + (cfg.high_threshold - cfg.low_threshold) * width / cfg.duration_normalizer_s;
        for j in 0..props.len() {
            if alive[j] {
                let o = iou(spans[b], spans[j]);
                if o > threshold {
                    scores[j] *= (-(o * o) / cfg.alpha).exp();
                }
            }
        }
    }
    out
}

/// Exhaustive evaluator: mAP per task per threshold, classes with no ground
/// truth skipped.
pub fn reference_map(
    dets: &[VideoDetections],
    gts: &[GroundTruth],
    classes: ClassCounts,
    thresholds: &[f64],
) -> Vec<(Task, Vec<f64>)> {
    let key = |task: Task, v: Option<usize>, n: Option<usize>| match task {
        Task::Verb => v.unwrap(),
        Task::Noun => n.unwrap(),
        Task::Action => v.unwrap() * classes.nouns + n.unwrap(),
    };
    let n_classes = |task: Task| match task {
        Task::Verb => classes.verbs,
        Task::Noun => classes.nouns,
        Task::Action => classes.verbs * classes.nouns,
    };
    let mut out = Vec::new();
    for task in Task::ALL {
        let mut maps = Vec::new();
        for &t in thresholds {
            let mut aps = Vec::new();
            for c in 0..n_classes(task) {
                // (video, start, end, matched)
                let mut gt_list: Vec<(String, (f64, f64), bool)> = Vec::new();
                for g in gts {
                    for e in &g.entries {
                        if key(task, Some(e.verb_id), Some(e.noun_id)) == c {
                            gt_list.push((g.video_id.clone(), (e.segment.start(), e.segment.end()), false));
                        }
                    }
                }
                if gt_list.is_empty() {
                    continue;
                }
                // (score, input order, video, span)
                let mut cand: Vec<(f64, usize, String, (f64, f64))> = Vec::new();
                let mut order = 0;
                for vd in dets {
                    for d in &vd.detections {
                        if d.task == task && key(task, d.verb_id, d.noun_id) == c {
                            cand.push((
                                d.score,
                                order,
                                vd.video_id.clone(),
                                (d.segment.start(), d.segment.end()),
                            ));
                        }
                        if d.task == task {
                            order += 1;
                        }
                    }
                }
                // selection sort: highest score, then earliest input
                let mut ranked = Vec::new();
                let mut used = vec![false; cand.len()];
                for _ in 0..cand.len() {
                    let mut b: Option<usize> = None;
                    for i in 0..cand.len() {
                        if used[i] {
                            continue;
                        }
                        if let Some(bi) = b {
                            if cand[i].0 > cand[bi].0 || (cand[i].0 == cand[bi].0 && cand[i].1 < cand[bi].1) {
                                b = Some(i);
                            }
                        } else {
                            b = Some(i);
                        }
                    }
                    used[b.unwrap()] = true;
                    ranked.push(b.unwrap());
                }
                let mut tp = 0.0;
                let mut sum = 0.0;
                for (rank, &i) in ranked.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in gt_list.iter().enumerate() {
                        if g.2 || g.0 != cand[i].2 {
                            continue;
                        }
                        let o = iou(cand[i].3, g.1);
                        if best.is_none_or(|(_, bo)| o > bo) {
                            best = Some((gi, o));
                        }
                    }
                    if let Some((gi, o)) = best {
                        if o >= t {
                            gt_list[gi].2 = true;
                            tp += 1.0;
                            sum += tp / (rank + 1) as f64;
                        }
                    }
                }
                aps.push(sum / gt_list.len() as f64);
            }
            maps.push(if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            });
        }
        out.push((task, maps));
    }
    out
}

/// Maximum over all parameters of the relative error between the analytic
/// gradient and a central finite difference, per block.
pub fn gradient_check(
    params: &ModelParams,
    sampling: &SamplingWeights,
    features: &Array2<f64>,
    giou: &CandidateMap,
    loss_cfg: &LossConfig,
    step: f64,
    floor: f64,
) -> Vec<(&'static str, f64)> {
    let (_, analytic) = loss_and_grad(params, sampling, features.view(), giou, loss_cfg).unwrap();
    let loss_at = |p: &ModelParams| {
        loss_and_grad(p, sampling, features.view(), giou, loss_cfg)
            .unwrap()
            .0
            .total
    };
    let mut out = Vec::new();
    for (bi, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.blocks_mut()[bi].1[i] += step;
            let mut minus = params.clone();
            minus.blocks_mut()[bi].1[i] -= step;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}

/// Every parameter, heads and biases included, uniform in `±scale`. Gradient
/// checks need this: the default initialization zeroes the output heads,
/// which would hide errors in every layer below them.
pub fn random_params<R: Rng>(cfg: &tad_core::bmn::BmnConfig, rng: &mut R, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(cfg);
    for (_, block) in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    p
}

/// A gIoU-like target map with guaranteed positive, negative and ignored cells.
pub fn random_label_map<R: Rng>(rng: &mut R, max_duration: usize, window_len: usize) -> CandidateMap {
    let mut values = Array2::from_shape_fn((max_duration, window_len), |_| rng.random_range(0.0..1.0));
    values[[0, 0]] = 0.95;
    values[[0, 1]] = 0.1;
    values[[1, 0]] = 0.5;
    CandidateMap::from_values(values)
}

/// A small random evaluation problem: up to three videos, coarse scores so
/// ties occur, and about half the detections near a ground-truth segment.
pub fn random_eval_instance(rng: &mut impl Rng) -> (Vec<VideoDetections>, Vec<GroundTruth>, ClassCounts) {
    let classes = ClassCounts { verbs: 3, nouns: 2 };
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for v in 0..rng.random_range(1..4) {
        let video_id = format!("v{v}");
        let mut entries = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let start = rng.random_range(0.0..30.0);
            entries.push(GroundTruthEntry {
                segment: Segment::new(start, start + rng.random_range(0.5..8.0)).unwrap(),
                verb_id: rng.random_range(0..classes.verbs),
                noun_id: rng.random_range(0..classes.nouns),
            });
        }
        let mut detections = Vec::new();
        for _ in 0..rng.random_range(0..12) {
            // half the time jitter a ground-truth segment so some match
            let segment = if !entries.is_empty() && rng.random_bool(0.5) {
                let g: &GroundTruthEntry = &entries[rng.random_range(0..entries.len())];
                let s = (g.segment.start() + rng.random_range(-1.0..1.0)).max(0.0);
                Segment::new(s, s + g.segment.duration() * rng.random_range(0.6..1.4)).unwrap()
            } else {
                let s = rng.random_range(0.0..30.0);
                Segment::new(s, s + rng.random_range(0.5..8.0)).unwrap()
            };
            let task = Task::ALL[rng.random_range(0..3)];
            let verb = rng.random_range(0..classes.verbs);
            let noun = rng.random_range(0..classes.nouns);
            detections.push(Detection {
                segment,
                task,
                verb_id: (task != Task::Noun).then_some(verb),
                noun_id: (task != Task::Verb).then_some(noun),
                // coarse scores so ties occur
                score: rng.random_range(1..6) as f64 / 5.0,
            });
        }
        gts.push(GroundTruth {
            video_id: video_id.clone(),
            duration_s: 40.0,
            entries,
        });
        dets.push(VideoDetections { video_id, detections });
    }
    (dets, gts, classes)
}

/// Every file under `dir`, as sorted `(relative path, bytes)` pairs.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}
