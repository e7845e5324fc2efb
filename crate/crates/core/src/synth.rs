//! Synthetic untrimmed videos with planted action segments.
//!
//! Each video is a sequence of Gaussian background features; during an
//! action with class pair `(v, n)` the clip features gain the sum of a verb
//! motif and a noun motif. Per-clip class scores are a tempered softmax of
//! noisy logits that peak at the active class inside segments and carry no
//! signal outside them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{write_feature_file, write_json, AnnotationDoc, Manifest, ManifestVideo, Split, MANIFEST_VERSION};
use crate::types::{ClipFeatureSequence, GroundTruth, GroundTruthEntry, Segment, TimeBase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub video_duration_mean_s: f64,
    /// Durations are uniform in `mean * (1 ± jitter)`.
    pub video_duration_jitter: f64,
    pub segments_per_video: usize,
    /// Log-normal segment durations, truncated to `[min, max)`.
    pub segment_median_s: f64,
    pub segment_log_sigma: f64,
    pub segment_min_s: f64,
    pub segment_max_s: f64,
    pub min_gap_s: f64,
    pub feature_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub motif_strength: f64,
    pub feature_noise: f64,
    /// Standard deviation of the Gaussian logit noise on class scores.
    pub score_noise: f64,
    /// Softmax temperature for class scores; 0 gives hard one-hot rows and
    /// `inf` gives uniform rows.
    pub score_temperature: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 50,
            video_duration_mean_s: 512.0,
            video_duration_jitter: 0.25,
            segments_per_video: 20,
            // median 4 s, sigma chosen so that ~98% of the truncated mass is below 20 s
            segment_median_s: 4.0,
            segment_log_sigma: 0.905,
            segment_min_s: 1.0,
            segment_max_s: 26.0,
            min_gap_s: 1.0,
            feature_dim: 32,
            num_verbs: 5,
            num_nouns: 5,
            motif_strength: 1.0,
            feature_noise: 1.0,
            score_noise: 0.5,
            score_temperature: 0.25,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, tb: &TimeBase, max_segment_s: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 || self.feature_dim == 0 || self.num_verbs == 0 || self.num_nouns == 0 {
            return bad("synth counts (videos, feature_dim, verbs, nouns) must be positive".into());
        }
        if !(self.segment_min_s > 0.0 && self.segment_min_s < self.segment_max_s) {
            return bad(format!(
                "segment_min_s ({}) must be positive and below segment_max_s ({})",
                self.segment_min_s, self.segment_max_s
            ));
        }
        if self.segment_max_s > max_segment_s {
            return bad(format!(
                "segment_max_s ({}) exceeds the longest proposal ({max_segment_s:.3}s)",
                self.segment_max_s
            ));
        }
        if !(self.segment_median_s > 0.0 && self.segment_log_sigma > 0.0) {
            return bad("segment duration distribution needs positive median and sigma".into());
        }
        if !(0.0..1.0).contains(&self.video_duration_jitter) || self.video_duration_mean_s <= 0.0 {
            return bad("video duration mean must be positive and jitter in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.motif_strength < 0.0 || self.feature_noise < 0.0 || self.score_noise < 0.0 || self.min_gap_s < 0.0 {
            return bad("noise levels, motif strength and gaps must be non-negative".into());
        }
        if self.score_temperature.is_nan() || self.score_temperature < 0.0 {
            return bad("score_temperature must be >= 0".into());
        }
        let shortest = self.video_duration_mean_s * (1.0 - self.video_duration_jitter);
        let k = self.segments_per_video as f64;
        if k * self.segment_min_s + (k + 1.0) * self.min_gap_s > shortest - tb.seconds_per_clip() {
            return bad(format!(
                "cannot pack {} segments into a {shortest:.1}s video",
                self.segments_per_video
            ));
        }
        Ok(())
    }

    /// Samples one segment duration.
    pub fn sample_duration<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let dist = LogNormal::new(self.segment_median_s.ln(), self.segment_log_sigma).expect("validated");
        loop {
            let d = dist.sample(rng);
            if d >= self.segment_min_s && d < self.segment_max_s {
                return d;
            }
        }
    }
}

/// Class motifs shared by every video of a dataset.
#[derive(Debug, Clone)]
pub struct Motifs {
    pub verb: Array2<f64>,
    pub noun: Array2<f64>,
}

impl Motifs {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw =
            |k: usize| Array2::from_shape_simple_fn((k, cfg.feature_dim), || rng.sample::<f64, _>(StandardNormal));
        Self {
            verb: draw(cfg.num_verbs),
            noun: draw(cfg.num_nouns),
        }
    }
}

/// Per-video generator stream derived from `(seed, index)`.
pub fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Tempered softmax of `logits / temperature`; temperature 0 puts equal mass
/// on the maximal entries.
pub fn tempered_softmax(logits: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let k = logits.len();
    if temperature.is_infinite() {
        return Array1::from_elem(k, 1.0 / k as f64);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if temperature == 0.0 {
        let hits = logits.iter().filter(|&&x| x == max).count() as f64;
        return logits.mapv(|x| if x == max { 1.0 / hits } else { 0.0 });
    }
    let e = logits.mapv(|x| ((x - max) / temperature).exp());
    let sum = e.sum();
    e / sum
}

fn class_scores<R: Rng + ?Sized>(rng: &mut R, k: usize, active: Option<usize>, cfg: &SynthConfig) -> Array1<f64> {
    let mut logits = Array1::from_shape_simple_fn(k, || cfg.score_noise * rng.sample::<f64, _>(StandardNormal));
    if let Some(c) = active {
        logits[c] += 1.0;
    }
    tempered_softmax(&logits, cfg.score_temperature)
}

pub fn generate_video<R: Rng + ?Sized>(
    rng: &mut R,
    video_id: &str,
    cfg: &SynthConfig,
    motifs: &Motifs,
    tb: &TimeBase,
) -> Result<(ClipFeatureSequence, GroundTruth)> {
    let jitter = cfg.video_duration_jitter;
    let raw = cfg.video_duration_mean_s * rng.random_range((1.0 - jitter)..=(1.0 + jitter));
    let num_clips = ((raw / tb.seconds_per_clip()).floor() as usize).max(1);
    let duration = tb.clip_to_seconds(num_clips);

    let k = cfg.segments_per_video;
    let durations: Vec<f64> = (0..k).map(|_| cfg.sample_duration(rng)).collect();
    let free = duration - durations.iter().sum::<f64>() - (k as f64 + 1.0) * cfg.min_gap_s;
    if free < 0.0 {
        return Err(Error::Config(format!(
            "{video_id}: {k} segments totalling {:.1}s do not fit in {duration:.1}s",
            durations.iter().sum::<f64>()
        )));
    }
    let mut cuts: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut entries = Vec::with_capacity(k);
    let mut prev_cut = 0.0;
    let mut cursor = 0.0;
    for (cut, len) in cuts.iter().zip(&durations) {
        let start = cursor + cfg.min_gap_s + (cut - prev_cut);
        entries.push(GroundTruthEntry {
            segment: Segment::new(start, start + len)?,
            verb_id: rng.random_range(0..cfg.num_verbs),
            noun_id: rng.random_range(0..cfg.num_nouns),
        });
        cursor = start + len;
        prev_cut = *cut;
    }

    // which entry (if any) is active at each clip centre
    let spc = tb.seconds_per_clip();
    let mut active = vec![None; num_clips];
    for (ei, e) in entries.iter().enumerate() {
        let first = ((e.segment.start() / spc) - 0.5).ceil().max(0.0) as usize;
        for (i, slot) in active.iter_mut().enumerate().skip(first) {
            let centre = (i as f64 + 0.5) * spc;
            if centre >= e.segment.end() {
                break;
            }
            if centre >= e.segment.start() {
                *slot = Some(ei);
            }
        }
    }

    let c = cfg.feature_dim;
    let mut features = Array2::zeros((num_clips, c));
    let mut verb_scores = Array2::zeros((num_clips, cfg.num_verbs));
    let mut noun_scores = Array2::zeros((num_clips, cfg.num_nouns));
    for (i, slot) in active.iter().enumerate() {
        let mut row = features.row_mut(i);
        row.mapv_inplace(|_: f64| cfg.feature_noise * rng.sample::<f64, _>(StandardNormal));
        let pair = slot.map(|ei| (entries[ei].verb_id, entries[ei].noun_id));
        if let Some((v, n)) = pair {
            row.scaled_add(cfg.motif_strength, &motifs.verb.row(v));
            row.scaled_add(cfg.motif_strength, &motifs.noun.row(n));
        }
        verb_scores
            .row_mut(i)
            .assign(&class_scores(rng, cfg.num_verbs, pair.map(|p| p.0), cfg));
        noun_scores
            .row_mut(i)
            .assign(&class_scores(rng, cfg.num_nouns, pair.map(|p| p.1), cfg));
    }

    let seq = ClipFeatureSequence::new(video_id, features, verb_scores, noun_scores, *tb)?;
    let gt = GroundTruth {
        video_id: video_id.to_string(),
        duration_s: duration,
        entries,
    };
    Ok((seq, gt))
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

/// Number of validation videos; the last videos by index form the split.
pub fn num_val_videos(cfg: &SynthConfig) -> usize {
    (cfg.num_videos as f64 * cfg.val_fraction).round() as usize
}

/// Generates every video and writes the dataset under `out_dir`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    tb: &TimeBase,
    max_segment_s: f64,
    out_dir: &Path,
    exec: Execution,
) -> Result<Manifest> {
    cfg.validate(tb, max_segment_s)?;
    let n_val = num_val_videos(cfg);
    if n_val == 0 || n_val >= cfg.num_videos {
        return Err(Error::Config(format!(
            "{} videos with val_fraction {} leave an empty {} split",
            cfg.num_videos,
            cfg.val_fraction,
            if n_val == 0 { "validation" } else { "training" }
        )));
    }
    let motifs = Motifs::new(cfg);
    for sub in ["features", "annotations"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let videos = exec.map_range(cfg.num_videos, |i| -> Result<ManifestVideo> {
        let id = video_id(i);
        let (seq, gt) = generate_video(&mut video_rng(cfg.seed, i), &id, cfg, &motifs, tb)?;
        let features = PathBuf::from("features").join(format!("{id}.tadf"));
        let annotations = PathBuf::from("annotations").join(format!("{id}.json"));
        write_feature_file(&out_dir.join(&features), &seq)?;
        write_json(&out_dir.join(&annotations), &AnnotationDoc::from(&gt))?;
        Ok(ManifestVideo {
            video_id: id,
            split: if i + n_val >= cfg.num_videos {
                Split::Val
            } else {
                Split::Train
            },
            duration_s: gt.duration_s,
            features,
            annotations,
        })
    });
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        timebase: *tb,
        feature_dim: cfg.feature_dim,
        num_verbs: cfg.num_verbs,
        num_nouns: cfg.num_nouns,
        videos: videos.into_iter().collect::<Result<Vec<_>>>()?,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
