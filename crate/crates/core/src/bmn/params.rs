use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use rand::Rng;

use super::BmnConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TADM";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4;

/// Trainable weights. The same shape doubles as gradient storage.
///
/// Field order is the checkpoint block order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: BmnConfig,
    /// `(hidden_base, feature_dim, 3)`
    pub conv1_w: Array3<f64>,
    pub conv1_b: Array1<f64>,
    /// `(hidden_base, hidden_base, 3)`
    pub conv2_w: Array3<f64>,
    pub conv2_b: Array1<f64>,
    /// `(hidden_map, hidden_base, num_samples)`: reduces the sample axis of
    /// the candidate features.
    pub sample_w: Array3<f64>,
    pub sample_b: Array1<f64>,
    /// `(hidden_map, hidden_map, 3, 3)` over `(duration, start)` offsets.
    pub map_w: Array4<f64>,
    pub map_b: Array1<f64>,
    pub cls_w: Array1<f64>,
    pub cls_b: Array1<f64>,
    pub reg_w: Array1<f64>,
    pub reg_b: Array1<f64>,
}

pub const BLOCK_NAMES: [&str; 12] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "sample_w", "sample_b", "map_w", "map_b", "cls_w", "cls_b", "reg_w",
    "reg_b",
];

impl ModelParams {
    pub fn zeros(cfg: &BmnConfig) -> Self {
        let (c, h, hm) = (cfg.feature_dim, cfg.hidden_base, cfg.hidden_map);
        Self {
            cfg: *cfg,
            conv1_w: Array3::zeros((h, c, 3)),
            conv1_b: Array1::zeros(h),
            conv2_w: Array3::zeros((h, h, 3)),
            conv2_b: Array1::zeros(h),
            sample_w: Array3::zeros((hm, h, cfg.num_samples)),
            sample_b: Array1::zeros(hm),
            map_w: Array4::zeros((hm, hm, 3, 3)),
            map_b: Array1::zeros(hm),
            cls_w: Array1::zeros(hm),
            cls_b: Array1::zeros(1),
            reg_w: Array1::zeros(hm),
            reg_b: Array1::zeros(1),
        }
    }

    /// Convolution and sample-reduction weights uniform in `±1/sqrt(fan_in)`.
    /// Biases and the two output heads start at zero, so an untrained model
    /// predicts 0.5 on every valid cell.
    pub fn init<R: Rng + ?Sized>(cfg: &BmnConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let (c, h, hm) = (cfg.feature_dim, cfg.hidden_base, cfg.hidden_map);
        let mut fill = |xs: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in xs {
                *x = rng.random_range(-bound..bound);
            }
        };
        fill(p.conv1_w.as_slice_mut().unwrap(), 3 * c);
        fill(p.conv2_w.as_slice_mut().unwrap(), 3 * h);
        fill(p.sample_w.as_slice_mut().unwrap(), h * cfg.num_samples);
        fill(p.map_w.as_slice_mut().unwrap(), 9 * hm);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.cfg)
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 12] {
        [
            (BLOCK_NAMES[0], self.conv1_w.as_slice().unwrap()),
            (BLOCK_NAMES[1], self.conv1_b.as_slice().unwrap()),
            (BLOCK_NAMES[2], self.conv2_w.as_slice().unwrap()),
            (BLOCK_NAMES[3], self.conv2_b.as_slice().unwrap()),
            (BLOCK_NAMES[4], self.sample_w.as_slice().unwrap()),
            (BLOCK_NAMES[5], self.sample_b.as_slice().unwrap()),
            (BLOCK_NAMES[6], self.map_w.as_slice().unwrap()),
            (BLOCK_NAMES[7], self.map_b.as_slice().unwrap()),
            (BLOCK_NAMES[8], self.cls_w.as_slice().unwrap()),
            (BLOCK_NAMES[9], self.cls_b.as_slice().unwrap()),
            (BLOCK_NAMES[10], self.reg_w.as_slice().unwrap()),
            (BLOCK_NAMES[11], self.reg_b.as_slice().unwrap()),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        [
            (BLOCK_NAMES[0], self.conv1_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[1], self.conv1_b.as_slice_mut().unwrap()),
            (BLOCK_NAMES[2], self.conv2_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[3], self.conv2_b.as_slice_mut().unwrap()),
            (BLOCK_NAMES[4], self.sample_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[5], self.sample_b.as_slice_mut().unwrap()),
            (BLOCK_NAMES[6], self.map_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[7], self.map_b.as_slice_mut().unwrap()),
            (BLOCK_NAMES[8], self.cls_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[9], self.cls_b.as_slice_mut().unwrap()),
            (BLOCK_NAMES[10], self.reg_w.as_slice_mut().unwrap()),
            (BLOCK_NAMES[11], self.reg_b.as_slice_mut().unwrap()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.num_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.window_len,
            c.max_duration,
            c.num_samples,
            c.feature_dim,
            c.hidden_base,
            c.hidden_map,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (_, block) in self.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "header needs {HEADER_LEN} bytes, file has {}",
                bytes.len()
            )));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {:?} at byte offset 0", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let version = word(1);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {version} at byte offset 4 (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg = BmnConfig {
            window_len: word(2) as usize,
            max_duration: word(3) as usize,
            num_samples: word(4) as usize,
            feature_dim: word(5) as usize,
            hidden_base: word(6) as usize,
            hidden_map: word(7) as usize,
        };
        cfg.validate()?;
        let mut p = Self::zeros(&cfg);
        let expected = HEADER_LEN + 8 * p.num_params();
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for the declared configuration, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for (_, block) in p.blocks_mut() {
            for v in block.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok(p)
    }
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}
