//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! reports a line even when an earlier one fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tad_core::bmn::{loss_and_grad, BmnConfig, CandidateMap, LossConfig, ModelParams, SamplingWeights};
use tad_core::eval::{average_precision, evaluate, match_detections};
use tad_core::fusion::Task;
use tad_core::io::Split;
use tad_core::optim::{cosine_lr, init_params};
use tad_core::pipeline::{detect_stage, detect_with_params, eval_stage, gen_data, train_stage};
use tad_core::postproc::{soft_nms, NmsConfig, Proposal};
use tad_core::windowing::plan_windows;
use tad_core::{Execution, PipelineConfig, Segment};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn contraction() -> Outcome {
    let cfg = BmnConfig {
        window_len: 200,
        max_duration: 100,
        num_samples: 32,
        feature_dim: 16,
        hidden_base: 16,
        hidden_map: 16,
    };
    let sampling = SamplingWeights::build(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut fast = Duration::ZERO;
    for _ in 0..3 {
        let hidden = Array2::from_shape_fn((200, 16), |_| rng.random_range(-2.0..2.0));
        let t = Instant::now();
        let got = sampling.candidate_features(hidden.view(), Execution::default());
        fast += t.elapsed();
        let want = common::naive_candidate_features(&hidden, 100, 32);
        let err = (&got - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(err);
    }
    check(
        worst < 1e-6 && fast.as_secs_f64() < 30.0,
        format!("max abs error {worst:.2e}, {:.2}s for 3 windows", fast.as_secs_f64()),
        format!("max abs error {worst:.2e}, {:.2}s", fast.as_secs_f64()),
    )
}

fn gradients() -> Outcome {
    let cfg = BmnConfig {
        window_len: 12,
        max_duration: 6,
        num_samples: 5,
        feature_dim: 3,
        hidden_base: 4,
        hidden_map: 3,
    };
    let sampling = SamplingWeights::build(&cfg);
    let mut worst = ("", 0.0f64);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = common::random_params(&cfg, &mut rng, 0.8);
        let features = Array2::from_shape_fn((cfg.window_len, cfg.feature_dim), |_| rng.random_range(-1.5..1.5));
        let labels = common::random_label_map(&mut rng, cfg.max_duration, cfg.window_len);
        let loss = LossConfig {
            cls_weight: 0.5 + seed as f64 * 0.25,
            ..LossConfig::default()
        };
        for (name, err) in common::gradient_check(&params, &sampling, &features, &labels, &loss, 1e-5, 1e-6) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    check(
        worst.1 < 1e-4,
        format!("5 seeds, worst relative error {:.2e} ({})", worst.1, worst.0),
        format!("relative error {:.2e} in block {}", worst.1, worst.0),
    )
}

fn random_proposals(rng: &mut ChaCha8Rng, n: usize) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i > 0 && rng.random_bool(0.2) {
            // exact or shifted copy of an earlier proposal
            let src = out[rng.random_range(0..i)];
            let shift = if rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(-1.0..1.0)
            };
            let start = (src.segment.start() + shift).max(0.0);
            Proposal {
                segment: Segment::new(start, start + src.segment.duration()).unwrap(),
                score: rng.random_range(0.0..1.0),
                source_window: i,
            }
        } else {
            let start = rng.random_range(0.0..60.0);
            Proposal {
                segment: Segment::new(start, start + rng.random_range(0.3..27.0)).unwrap(),
                score: if rng.random_bool(0.1) {
                    0.5
                } else {
                    rng.random_range(0.0..1.0)
                },
                source_window: i,
            }
        };
        out.push(p);
    }
    out
}

fn soft_nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = rng.random_range(0..=50);
        let props = random_proposals(&mut rng, n);
        let cfg = NmsConfig {
            max_keep: rng.random_range(1..=60),
            ..NmsConfig::default()
        };
        if soft_nms(&props, &cfg) != common::reference_soft_nms(&props, &cfg) {
            return Err(format!("instance {case} (n = {n}) differs from the reference"));
        }
    }
    Ok("200 instances identical to the reference".into())
}

fn window_coverage() -> Outcome {
    let cfg = PipelineConfig::default();
    let tb = cfg.timebase;
    let max_len = tb.clip_to_seconds(cfg.window.max_duration_clips);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for _ in 0..1000 {
        let num_clips = rng.random_range(1..5000usize);
        let video_s = tb.clip_to_seconds(num_clips);
        let dur = rng.random_range(0.01..=max_len).min(video_s);
        let start = rng.random_range(0.0..=(video_s - dur));
        let seg = Segment::new(start, start + dur).unwrap();
        let covered = plan_windows(num_clips, &cfg.window).iter().any(|w| {
            let span = w.span(&tb);
            span.start() <= seg.start() && seg.end() <= span.end()
        });
        if !covered {
            failures += 1;
        }
    }
    check(
        failures == 0,
        "1000 segments, 0 uncovered".into(),
        format!("{failures} of 1000 segments uncovered"),
    )
}

fn evaluator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let thresholds = [0.1, 0.3, 0.5, 0.7];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (dets, gts, classes) = common::random_eval_instance(&mut rng);
        let report = evaluate(&dets, &gts, classes, &thresholds, Execution::default()).map_err(|e| e.to_string())?;
        for (task, maps) in common::reference_map(&dets, &gts, classes, &thresholds) {
            for (a, b) in report.task(task).map.iter().zip(&maps) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let seg = |a: f64, b: f64| Segment::new(a, b).unwrap();
    let gt = [seg(0.0, 10.0), seg(20.0, 30.0)];
    let ap_two_hits = average_precision(&match_detections(&[seg(0.0, 10.0), seg(20.0, 30.0)], &gt, 0.5), 2);
    let ap_one_hit = average_precision(&match_detections(&[seg(0.0, 10.0), seg(40.0, 50.0)], &gt, 0.5), 2);
    let ap_single = average_precision(&match_detections(&[seg(0.0, 10.0)], &[seg(0.0, 10.0)], 0.5), 1);
    let examples = ap_two_hits == 1.0 && ap_one_hit == 0.5 && ap_single == 1.0;
    check(
        worst < 1e-12 && examples,
        format!("100 instances, max difference {worst:.1e}; AP examples 1.0 / 0.5 / 1.0"),
        format!("max difference {worst:.1e}; AP examples {ap_two_hits} / {ap_one_hit} / {ap_single}"),
    )
}

fn end_to_end(root: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = PipelineConfig::default();
    gen_data(&cfg, &root.join("data")).map_err(|e| e.to_string())?;
    let manifest = root.join("data/manifest.json");
    let ckpt = root.join("model.tadm");
    let outcome = train_stage(&cfg, &manifest, &ckpt, None).map_err(|e| e.to_string())?;
    detect_stage(&cfg, &ckpt, &manifest, Split::Val, &root.join("det")).map_err(|e| e.to_string())?;
    let trained = eval_stage(&cfg, &manifest, Split::Val, &root.join("det"), None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed().as_secs_f64();

    let untrained_params = init_params(&outcome.params.cfg, cfg.train.seed);
    detect_with_params(&cfg, &untrained_params, &manifest, Split::Val, &root.join("det0"))
        .map_err(|e| e.to_string())?;
    let untrained = eval_stage(&cfg, &manifest, Split::Val, &root.join("det0"), None).map_err(|e| e.to_string())?;

    let map = trained.task(Task::Action).avg;
    let base = untrained.task(Task::Action).avg;
    let losses: Vec<String> = outcome.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
    eprintln!("  epoch losses: {}", losses.join(" "));
    eprintln!("{}", trained.render_table());
    check(
        map >= 0.50 && map >= 5.0 * base && elapsed < 600.0,
        format!("action avg mAP {map:.4} (untrained {base:.4}), {elapsed:.1}s"),
        format!("action avg mAP {map:.4} (untrained {base:.4}), {elapsed:.1}s"),
    )
}

fn full_chain(root: &Path, execution: Execution) -> Result<Vec<(String, Vec<u8>)>, String> {
    let overrides = [
        format!(
            "execution=\"{}\"",
            if execution == Execution::Parallel {
                "parallel"
            } else {
                "sequential"
            }
        ),
        "synth.num_videos=6".to_string(),
        "synth.video_duration_mean_s=120.0".to_string(),
        "synth.segments_per_video=5".to_string(),
        "train.epochs=2".to_string(),
    ];
    let cfg = PipelineConfig::load(None, &overrides).map_err(|e| e.to_string())?;
    let out = root.join("out");
    fs::create_dir_all(&out).unwrap();
    let manifest = root.join("data/manifest.json");
    gen_data(&cfg, &root.join("data")).map_err(|e| e.to_string())?;
    train_stage(&cfg, &manifest, &out.join("model.tadm"), Some(&out.join("train.jsonl"))).map_err(|e| e.to_string())?;
    detect_stage(&cfg, &out.join("model.tadm"), &manifest, Split::Val, &out.join("det")).map_err(|e| e.to_string())?;
    eval_stage(
        &cfg,
        &manifest,
        Split::Val,
        &out.join("det"),
        Some(&out.join("report.json")),
    )
    .map_err(|e| e.to_string())?;
    Ok(common::snapshot(root))
}

fn determinism(root: &Path) -> Outcome {
    let a = full_chain(&root.join("a"), Execution::Parallel)?;
    let b = full_chain(&root.join("b"), Execution::Sequential)?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        a.len() == b.len() && differing.is_empty() && names.iter().any(|n| n.ends_with("report.json")),
        format!("{} files byte-identical across runs (parallel vs sequential)", a.len()),
        format!("{} vs {} files, differing: {:?}", a.len(), b.len(), differing),
    )
}

fn analytic() -> Outcome {
    let half = cosine_lr(0.5, 0.002);
    let cfg = BmnConfig {
        window_len: 8,
        max_duration: 4,
        num_samples: 4,
        feature_dim: 2,
        hidden_base: 2,
        hidden_map: 2,
    };
    let params = ModelParams::zeros(&cfg);
    let mut labels = Array2::zeros((4, 8));
    labels[[0, 0]] = 0.95;
    let (loss, _) = loss_and_grad(
        &params,
        &SamplingWeights::build(&cfg),
        Array2::zeros((8, 2)).view(),
        &CandidateMap::from_values(labels),
        &LossConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let seg = Segment::new(10.0, 20.0).unwrap();
    let props = [
        Proposal {
            segment: seg,
            score: 0.9,
            source_window: 0,
        },
        Proposal {
            segment: seg,
            score: 0.8,
            source_window: 0,
        },
    ];
    let kept = soft_nms(&props, &NmsConfig::default());
    let decayed = kept[1].score;
    let ok = (half - 0.001).abs() < 1e-15
        && (loss.cls - std::f64::consts::LN_2).abs() < 1e-4
        && (decayed - 0.0657).abs() < 1e-4;
    let msg = format!(
        "cosine_lr(0.5) = {half}, balanced BCE = {:.6}, duplicate decay = {decayed:.6}",
        loss.cls
    );
    check(ok, msg.clone(), msg)
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("1 candidate feature contraction", Box::new(contraction)),
        ("2 analytic gradients", Box::new(gradients)),
        ("3 soft-nms reference", Box::new(soft_nms_oracle)),
        ("4 window coverage", Box::new(window_coverage)),
        ("5 evaluator reference", Box::new(evaluator_oracle)),
        (
            "6 end-to-end synthetic run",
            Box::new(|| end_to_end(&tmp.path().join("e2e"))),
        ),
        ("7 determinism", Box::new(|| determinism(&tmp.path().join("det")))),
        ("8 analytic checks", Box::new(analytic)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let t = Instant::now();
        let result =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
