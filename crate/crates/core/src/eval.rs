//! Mean average precision at temporal IoU thresholds for the verb, noun and
//! action tasks.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{Detection, Task};
use crate::types::{GroundTruth, Segment};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Greedy matching of score-sorted detections to ground truth of a single
/// video and class. A detection is a true positive when its best-IoU
/// unmatched ground truth reaches `tiou`; each ground truth matches once.
pub fn match_detections(dets: &[Segment], gts: &[Segment], tiou: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, d.iou(g)))
                .fold(None::<(usize, f64)>, |acc, (j, iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((j, iou)),
                });
            match best {
                Some((j, iou)) if iou >= tiou => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Sum of precision at each true positive, divided by `num_gt`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / num_gt as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDetections {
    pub video_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub verbs: usize,
    pub nouns: usize,
}

impl ClassCounts {
    fn num_classes(&self, task: Task) -> usize {
        match task {
            Task::Verb => self.verbs,
            Task::Noun => self.nouns,
            Task::Action => self.verbs * self.nouns,
        }
    }

    fn class_of(&self, task: Task, verb: Option<usize>, noun: Option<usize>) -> Option<usize> {
        match task {
            Task::Verb => verb.filter(|&v| v < self.verbs),
            Task::Noun => noun.filter(|&n| n < self.nouns),
            Task::Action => match (verb, noun) {
                (Some(v), Some(n)) if v < self.verbs && n < self.nouns => Some(v * self.nouns + n),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verb_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noun_id: Option<usize>,
    pub num_gt: usize,
    /// AP at each threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    /// mAP at each threshold.
    pub map: Vec<f64>,
    pub avg: f64,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> &TaskReport {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .expect("every task is reported")
    }

    /// Table with one row per task and one column per threshold plus the
    /// average, in percent.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "mAP");
        for t in &self.thresholds {
            let _ = write!(s, " {:>7}", format!("@{t}"));
        }
        let _ = writeln!(s, " {:>7}", "Avg");
        for tr in &self.tasks {
            let mut name = tr.task.name().to_string();
            name[..1].make_ascii_uppercase();
            let _ = write!(s, "{name:<8}");
            for v in &tr.map {
                let _ = write!(s, " {:>7.2}", 100.0 * v);
            }
            let _ = writeln!(s, " {:>7.2}", 100.0 * tr.avg);
        }
        s
    }
}

struct ClassData {
    /// `(video, segment)` in evaluation order.
    dets: Vec<(usize, Segment)>,
    gts: HashMap<usize, Vec<Segment>>,
    num_gt: usize,
}

/// Scores every task at every threshold. Classes without ground truth are
/// left out of the mean; detection score ties keep input order.
pub fn evaluate(
    detections: &[VideoDetections],
    gts: &[GroundTruth],
    classes: ClassCounts,
    thresholds: &[f64],
    exec: Execution,
) -> Result<EvalReport> {
    let video_index: HashMap<&str, usize> = gts.iter().enumerate().map(|(i, g)| (g.video_id.as_str(), i)).collect();
    if video_index.len() != gts.len() {
        return Err(Error::Invalid("duplicate video id in ground truth".into()));
    }
    for g in gts {
        g.validate(classes.verbs, classes.nouns)?;
    }
    for vd in detections {
        if !video_index.contains_key(vd.video_id.as_str()) {
            return Err(Error::Invalid(format!(
                "detections for unknown video `{}`",
                vd.video_id
            )));
        }
        for (i, d) in vd.detections.iter().enumerate() {
            if classes.class_of(d.task, d.verb_id, d.noun_id).is_none() {
                return Err(Error::Invalid(format!(
                    "{}: {} detection {i} has unknown class ids (verb {:?}, noun {:?})",
                    vd.video_id, d.task, d.verb_id, d.noun_id
                )));
            }
        }
    }

    let mut jobs = Vec::new();
    for task in Task::ALL {
        let mut per_class: Vec<ClassData> = (0..classes.num_classes(task))
            .map(|_| ClassData {
                dets: Vec::new(),
                gts: HashMap::new(),
                num_gt: 0,
            })
            .collect();
        for (vi, g) in gts.iter().enumerate() {
            for e in &g.entries {
                let c = classes
                    .class_of(task, Some(e.verb_id), Some(e.noun_id))
                    .expect("validated");
                per_class[c].gts.entry(vi).or_default().push(e.segment);
                per_class[c].num_gt += 1;
            }
        }
        let mut scored: Vec<(f64, usize, usize, Segment)> = Vec::new();
        for vd in detections {
            let vi = video_index[vd.video_id.as_str()];
            for d in vd.detections.iter().filter(|d| d.task == task) {
                let c = classes.class_of(task, d.verb_id, d.noun_id).expect("validated");
                scored.push((d.score, c, vi, d.segment));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (_, c, vi, seg) in scored {
            per_class[c].dets.push((vi, seg));
        }
        for (c, data) in per_class.into_iter().enumerate() {
            if data.num_gt > 0 {
                jobs.push((task, c, data));
            }
        }
    }

    let aps = exec.map(&jobs, |(_, _, data)| {
        thresholds.iter().map(|&t| class_ap(data, t)).collect::<Vec<f64>>()
    });

    let mut tasks = Vec::new();
    for task in Task::ALL {
        let mut per_class = Vec::new();
        for ((jt, c, data), ap) in jobs.iter().zip(&aps) {
            if *jt != task {
                continue;
            }
            let (verb_id, noun_id) = match task {
                Task::Verb => (Some(*c), None),
                Task::Noun => (None, Some(*c)),
                Task::Action => (Some(c / classes.nouns), Some(c % classes.nouns)),
            };
            per_class.push(ClassAp {
                verb_id,
                noun_id,
                num_gt: data.num_gt,
                ap: ap.clone(),
            });
        }
        let map: Vec<f64> = (0..thresholds.len())
            .map(|k| {
                if per_class.is_empty() {
                    0.0
                } else {
                    per_class.iter().map(|c| c.ap[k]).sum::<f64>() / per_class.len() as f64
                }
            })
            .collect();
        let avg = if map.is_empty() {
            0.0
        } else {
            map.iter().sum::<f64>() / map.len() as f64
        };
        tasks.push(TaskReport {
            task,
            map,
            avg,
            per_class,
        });
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        tasks,
    })
}

fn class_ap(data: &ClassData, tiou: f64) -> f64 {
    let mut by_video: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, (vi, _)) in data.dets.iter().enumerate() {
        by_video.entry(*vi).or_default().push(k);
    }
    let mut flags = vec![false; data.dets.len()];
    for (vi, idxs) in by_video {
        let segs: Vec<Segment> = idxs.iter().map(|&k| data.dets[k].1).collect();
        let gts = data.gts.get(&vi).map(Vec::as_slice).unwrap_or(&[]);
        for (k, hit) in idxs.into_iter().zip(match_detections(&segs, gts, tiou)) {
            flags[k] = hit;
        }
    }
    average_precision(&flags, data.num_gt)
}
