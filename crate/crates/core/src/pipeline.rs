//! The four pipeline stages: dataset generation, training, detection and
//! evaluation. Each stage reads and writes the on-disk formats in [`crate::io`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bmn::{compute_giou_map, forward, read_checkpoint, write_checkpoint, ModelParams, SamplingWeights};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ClassCounts, EvalReport, VideoDetections};
use crate::fusion::{make_detections, Task, TaskDetections};
use crate::io::{read_detection_dir, write_json, Dataset, DetectionDoc, Manifest, Split};
use crate::optim::{train, TrainOutcome, TrainingWindow};
use crate::postproc::{pool_windows, score_candidates, soft_nms};
use crate::synth::generate_dataset;
use crate::types::{ClipFeatureSequence, GroundTruth};
use crate::windowing::{plan_windows, slice_window};

pub fn gen_data(cfg: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    generate_dataset(&cfg.synth, &cfg.timebase, cfg.max_segment_s(), out_dir, cfg.execution)
}

fn check_timebase(cfg: &PipelineConfig, ds: &Dataset) -> Result<()> {
    if ds.manifest.timebase != cfg.timebase {
        return Err(Error::Config(format!(
            "dataset time base {:?} differs from configured {:?}",
            ds.manifest.timebase, cfg.timebase
        )));
    }
    Ok(())
}

/// Every window of every video in `split`, paired with its gIoU targets.
pub fn training_windows(cfg: &PipelineConfig, ds: &Dataset, split: Split) -> Result<Vec<TrainingWindow>> {
    check_timebase(cfg, ds)?;
    let bmn = cfg.bmn(ds.manifest.feature_dim);
    let videos: Vec<_> = ds.videos(split).collect();
    let per_video = cfg.execution.map(&videos, |v| -> Result<Vec<TrainingWindow>> {
        let seq = ds.load_sequence(v)?;
        let gt = ds.load_ground_truth(v)?;
        plan_windows(seq.num_clips(), &cfg.window)
            .iter()
            .map(|w| {
                Ok(TrainingWindow {
                    features: slice_window(&seq, w)?.features,
                    giou: compute_giou_map(w, &gt.entries, &bmn, &cfg.timebase),
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_video {
        out.extend(r?);
    }
    Ok(out)
}

/// Trains on the `train` split; writes the checkpoint and, if requested, a
/// JSON-lines log of `(epoch, step, lr, loss)` records.
pub fn train_stage(
    cfg: &PipelineConfig,
    manifest: &Path,
    checkpoint_out: &Path,
    log_out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(manifest)?;
    let windows = training_windows(cfg, &ds, Split::Train)?;
    let bmn = cfg.bmn(ds.manifest.feature_dim);
    let mut log = match log_out {
        Some(p) => Some((fs::File::create(p).map_err(|e| Error::io(p, e))?, p.to_path_buf())),
        None => None,
    };
    let mut log_err = None;
    let outcome = train(&windows, &bmn, &cfg.train, cfg.execution, |rec| {
        if let Some((f, p)) = log.as_mut() {
            let line = serde_json::to_string(rec).expect("plain record");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(Error::io(p.clone(), e));
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    write_checkpoint(checkpoint_out, &outcome.params)?;
    Ok(outcome)
}

/// Proposals and per-task detections for one video.
pub fn detect_video(
    cfg: &PipelineConfig,
    params: &ModelParams,
    sampling: &SamplingWeights,
    seq: &ClipFeatureSequence,
) -> Result<TaskDetections> {
    if seq.feature_dim() != params.cfg.feature_dim {
        return Err(Error::Shape(format!(
            "{}: feature dim {} does not match checkpoint feature dim {}",
            seq.video_id,
            seq.feature_dim(),
            params.cfg.feature_dim
        )));
    }
    let windows = plan_windows(seq.num_clips(), &cfg.window);
    let idx: Vec<usize> = (0..windows.len()).collect();
    let per_window = cfg.execution.map(&idx, |&wi| {
        let w = &windows[wi];
        let slice = slice_window(seq, w)?;
        let out = forward(params, sampling, slice.features.view())?;
        score_candidates(
            &out.cls,
            &out.reg,
            w,
            wi,
            &seq.timebase,
            seq.duration_s(),
            cfg.nms.score_floor,
        )
    });
    let pooled = pool_windows(per_window.into_iter().collect::<Result<Vec<_>>>()?);
    let kept = soft_nms(&pooled, &cfg.nms);
    Ok(make_detections(&kept, seq, &cfg.fusion))
}

fn check_model_matches(cfg: &PipelineConfig, params: &ModelParams, feature_dim: usize) -> Result<()> {
    let m = &params.cfg;
    if m.window_len != cfg.window.window_len_clips || m.max_duration != cfg.window.max_duration_clips {
        return Err(Error::Config(format!(
            "checkpoint was trained with L={} D={}, configuration has L={} D={}",
            m.window_len, m.max_duration, cfg.window.window_len_clips, cfg.window.max_duration_clips
        )));
    }
    if m.feature_dim != feature_dim {
        return Err(Error::Shape(format!(
            "dataset feature dim {feature_dim} does not match checkpoint feature dim {}",
            m.feature_dim
        )));
    }
    Ok(())
}

pub fn detection_path(dir: &Path, video_id: &str, task: Task) -> PathBuf {
    dir.join(format!("{video_id}.{task}.json"))
}

/// Runs `params` over every video in `split` and writes one detection
/// document per video and task into `out_dir`.
pub fn detect_with_params(
    cfg: &PipelineConfig,
    params: &ModelParams,
    manifest: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<Vec<VideoDetections>> {
    cfg.validate()?;
    let ds = Dataset::open(manifest)?;
    check_timebase(cfg, &ds)?;
    check_model_matches(cfg, params, ds.manifest.feature_dim)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sampling = SamplingWeights::build(&params.cfg);
    let videos: Vec<_> = ds.videos(split).collect();
    let results = cfg.execution.map(&videos, |v| -> Result<VideoDetections> {
        let seq = ds.load_sequence(v)?;
        let dets = detect_video(cfg, params, &sampling, &seq)?;
        let mut all = Vec::new();
        for task in Task::ALL {
            let list = dets.get(task);
            write_json(
                &detection_path(out_dir, &v.video_id, task),
                &DetectionDoc::new(&v.video_id, task, list),
            )?;
            all.extend_from_slice(list);
        }
        Ok(VideoDetections {
            video_id: v.video_id.clone(),
            detections: all,
        })
    });
    results.into_iter().collect()
}

pub fn detect_stage(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<Vec<VideoDetections>> {
    let params = read_checkpoint(checkpoint)?;
    detect_with_params(cfg, &params, manifest, split, out_dir)
}

pub fn load_ground_truth(ds: &Dataset, split: Split) -> Result<Vec<GroundTruth>> {
    ds.videos(split).map(|v| ds.load_ground_truth(v)).collect()
}

/// Evaluates the detection documents in `det_dir` against `split` and, if
/// requested, writes the report as JSON.
pub fn eval_stage(
    cfg: &PipelineConfig,
    manifest: &Path,
    split: Split,
    det_dir: &Path,
    report_out: Option<&Path>,
) -> Result<EvalReport> {
    let ds = Dataset::open(manifest)?;
    let gts = load_ground_truth(&ds, split)?;
    let dets = read_detection_dir(det_dir)?;
    let classes = ClassCounts {
        verbs: ds.manifest.num_verbs,
        nouns: ds.manifest.num_nouns,
    };
    let report = evaluate(&dets, &gts, classes, &cfg.eval.thresholds, cfg.execution)?;
    if let Some(p) = report_out {
        write_json(p, &report)?;
    }
    Ok(report)
}
