//! On-disk formats: binary clip-feature files, JSON annotation/detection
//! documents, and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::VideoDetections;
use crate::fusion::{Detection, Task};
use crate::types::{check_simplex, ClipFeatureSequence, GroundTruth, GroundTruthEntry, Segment, TimeBase};

pub const FEATURE_MAGIC: [u8; 4] = *b"TADF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 4 * 4;

/// Raw contents of a feature file: `N x C` features followed by `N x V`
/// verb scores and `N x Nn` noun scores, all row-major little-endian `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub num_clips: usize,
    pub feature_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub features: Vec<f32>,
    pub verb_scores: Vec<f32>,
    pub noun_scores: Vec<f32>,
}

impl FeatureFile {
    pub fn from_sequence(seq: &ClipFeatureSequence) -> Self {
        let cast = |m: &Array2<f64>| m.iter().map(|&v| v as f32).collect::<Vec<f32>>();
        Self {
            num_clips: seq.num_clips(),
            feature_dim: seq.feature_dim(),
            num_verbs: seq.num_verbs(),
            num_nouns: seq.num_nouns(),
            features: cast(&seq.features),
            verb_scores: cast(&seq.verb_scores),
            noun_scores: cast(&seq.noun_scores),
        }
    }

    pub fn into_sequence(self, video_id: &str, timebase: TimeBase) -> Result<ClipFeatureSequence> {
        let n = self.num_clips;
        let widen = |v: Vec<f32>, cols: usize| {
            Array2::from_shape_vec((n, cols), v.into_iter().map(f64::from).collect())
                .expect("payload length checked at construction")
        };
        ClipFeatureSequence::new(
            video_id,
            widen(self.features, self.feature_dim),
            widen(self.verb_scores, self.num_verbs),
            widen(self.noun_scores, self.num_nouns),
            timebase,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.features.len() + self.verb_scores.len() + self.noun_scores.len();
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * payload);
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for v in [self.num_clips, self.feature_dim, self.num_verbs, self.num_nouns] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.features.iter().chain(&self.verb_scores).chain(&self.noun_scores) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "feature file",
            detail,
        };
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(bad(format!(
                "truncated header: expected {FEATURE_HEADER_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(bad(format!(
                "bad magic {:02x?} at byte offset 0, expected \"TADF\"",
                &bytes[..4]
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let version = word(1) as u32;
        if version != FEATURE_VERSION {
            return Err(bad(format!(
                "unsupported version {version} at byte offset 4, expected {FEATURE_VERSION}"
            )));
        }
        let (n, c, v, nn) = (word(2), word(3), word(4), word(5));
        for (name, value, offset) in [("N", n, 8), ("C", c, 12), ("V", v, 16), ("Nn", nn, 20)] {
            if value == 0 {
                return Err(bad(format!("header field {name} at byte offset {offset} is zero")));
            }
        }
        let counts = [n * c, n * v, n * nn];
        let expected = FEATURE_HEADER_LEN as u64 + 4 * counts.iter().map(|&x| x as u64).sum::<u64>();
        if bytes.len() as u64 != expected {
            return Err(bad(format!(
                "payload length mismatch: header N={n} C={c} V={v} Nn={nn} requires {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut floats = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let mut take = |k: usize| floats.by_ref().take(k).collect::<Vec<f32>>();
        let file = Self {
            num_clips: n,
            feature_dim: c,
            num_verbs: v,
            num_nouns: nn,
            features: take(counts[0]),
            verb_scores: take(counts[1]),
            noun_scores: take(counts[2]),
        };
        file.check_scores()?;
        Ok(file)
    }

    fn check_scores(&self) -> Result<()> {
        let scores_offset = FEATURE_HEADER_LEN + 4 * self.features.len();
        let blocks = [
            ("verb", &self.verb_scores, self.num_verbs, scores_offset),
            (
                "noun",
                &self.noun_scores,
                self.num_nouns,
                scores_offset + 4 * self.verb_scores.len(),
            ),
        ];
        for (name, scores, k, base) in blocks {
            for (i, row) in scores.chunks_exact(k).enumerate() {
                let row64: ndarray::Array1<f64> = row.iter().map(|&x| f64::from(x)).collect();
                if let Err(e) = check_simplex(row64.view()) {
                    return Err(Error::Format {
                        what: "feature file",
                        detail: format!(
                            "{name} score row {i} at byte offset {} is not a probability vector: {e}",
                            base + 4 * i * k
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn write_feature_file(path: &Path, seq: &ClipFeatureSequence) -> Result<()> {
    fs::write(path, FeatureFile::from_sequence(seq).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub start_s: f64,
    pub end_s: f64,
    pub verb_id: usize,
    pub noun_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub video_id: String,
    pub duration_s: f64,
    pub entries: Vec<AnnotationEntry>,
}

impl From<&GroundTruth> for AnnotationDoc {
    fn from(g: &GroundTruth) -> Self {
        Self {
            video_id: g.video_id.clone(),
            duration_s: g.duration_s,
            entries: g
                .entries
                .iter()
                .map(|e| AnnotationEntry {
                    start_s: e.segment.start(),
                    end_s: e.segment.end(),
                    verb_id: e.verb_id,
                    noun_id: e.noun_id,
                })
                .collect(),
        }
    }
}

impl AnnotationDoc {
    pub fn to_ground_truth(&self) -> Result<GroundTruth> {
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(GroundTruthEntry {
                    segment: Segment::new(e.start_s, e.end_s)
                        .map_err(|err| Error::Invalid(format!("{}: entry {i}: {err}", self.video_id)))?,
                    verb_id: e.verb_id,
                    noun_id: e.noun_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruth {
            video_id: self.video_id.clone(),
            duration_s: self.duration_s,
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun_id: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDoc {
    pub video_id: String,
    pub task: Task,
    pub entries: Vec<DetectionEntry>,
}

impl DetectionDoc {
    pub fn new(video_id: &str, task: Task, dets: &[Detection]) -> Self {
        Self {
            video_id: video_id.to_string(),
            task,
            entries: dets
                .iter()
                .map(|d| DetectionEntry {
                    start_s: d.segment.start(),
                    end_s: d.segment.end(),
                    verb_id: d.verb_id,
                    noun_id: d.noun_id,
                    score: d.score,
                })
                .collect(),
        }
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let segment = Segment::new(e.start_s, e.end_s)
                    .map_err(|err| Error::Invalid(format!("{} {}: entry {i}: {err}", self.video_id, self.task)))?;
                let ok = match self.task {
                    Task::Verb => e.verb_id.is_some() && e.noun_id.is_none(),
                    Task::Noun => e.noun_id.is_some() && e.verb_id.is_none(),
                    Task::Action => e.verb_id.is_some() && e.noun_id.is_some(),
                };
                if !ok {
                    return Err(Error::Invalid(format!(
                        "{} {}: entry {i} carries the wrong class ids for its task",
                        self.video_id, self.task
                    )));
                }
                Ok(Detection {
                    segment,
                    task: self.task,
                    verb_id: e.verb_id,
                    noun_id: e.noun_id,
                    score: e.score,
                })
            })
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Invalid(format!(
                "unknown split `{other}` (expected train or val)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub split: Split,
    pub duration_s: f64,
    /// Relative to the manifest's directory.
    pub features: PathBuf,
    pub annotations: PathBuf,
}

/// Index of a dataset directory: one feature file and one annotation
/// document per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub timebase: TimeBase,
    pub feature_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub videos: Vec<ManifestVideo>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(manifest_path)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!(
                    "{}: format_version {} is not supported (expected {MANIFEST_VERSION})",
                    manifest_path.display(),
                    manifest.format_version
                ),
            });
        }
        manifest.timebase.validate()?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn videos(&self, split: Split) -> impl Iterator<Item = &ManifestVideo> {
        self.manifest.videos.iter().filter(move |v| v.split == split)
    }

    pub fn load_sequence(&self, video: &ManifestVideo) -> Result<ClipFeatureSequence> {
        let path = self.root.join(&video.features);
        let file = read_feature_file(&path)?;
        let m = &self.manifest;
        if file.num_verbs != m.num_verbs || file.num_nouns != m.num_nouns {
            return Err(Error::Invalid(format!(
                "{}: {} verbs / {} nouns, manifest declares {} / {}",
                path.display(),
                file.num_verbs,
                file.num_nouns,
                m.num_verbs,
                m.num_nouns
            )));
        }
        file.into_sequence(&video.video_id, m.timebase)
    }

    pub fn load_ground_truth(&self, video: &ManifestVideo) -> Result<GroundTruth> {
        let path = self.root.join(&video.annotations);
        let doc: AnnotationDoc = read_json(&path)?;
        if doc.video_id != video.video_id {
            return Err(Error::Invalid(format!(
                "{}: annotations are for `{}`, manifest expects `{}`",
                path.display(),
                doc.video_id,
                video.video_id
            )));
        }
        let gt = doc.to_ground_truth()?;
        gt.validate(self.manifest.num_verbs, self.manifest.num_nouns)?;
        Ok(gt)
    }
}

/// Reads every `*.json` detection document in `dir`, grouped per video.
pub fn read_detection_dir(dir: &Path) -> Result<Vec<VideoDetections>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut out: Vec<VideoDetections> = Vec::new();
    for p in paths {
        let doc: DetectionDoc = read_json(&p)?;
        let dets = doc.to_detections()?;
        match out.iter_mut().find(|v| v.video_id == doc.video_id) {
            Some(v) => v.detections.extend(dets),
            None => out.push(VideoDetections {
                video_id: doc.video_id,
                detections: dets,
            }),
        }
    }
    Ok(out)
}
