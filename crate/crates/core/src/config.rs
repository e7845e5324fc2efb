//! Layered configuration: built-in defaults, then a TOML file, then
//! `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bmn::BmnConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLDS;
use crate::exec::Execution;
use crate::fusion::FusionConfig;
use crate::optim::TrainConfig;
use crate::postproc::NmsConfig;
use crate::synth::SynthConfig;
use crate::types::TimeBase;
use crate::windowing::WindowConfig;

/// Network sizes not implied by the window configuration or the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_samples: usize,
    pub hidden_base: usize,
    pub hidden_map: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_samples: 32,
            hidden_base: 8,
            hidden_map: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub execution: Execution,
    pub timebase: TimeBase,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nms: NmsConfig,
    pub fusion: FusionConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn bmn(&self, feature_dim: usize) -> BmnConfig {
        BmnConfig {
            window_len: self.window.window_len_clips,
            max_duration: self.window.max_duration_clips,
            num_samples: self.model.num_samples,
            feature_dim,
            hidden_base: self.model.hidden_base,
            hidden_map: self.model.hidden_map,
        }
    }

    /// Longest proposal the window configuration admits, in seconds.
    pub fn max_segment_s(&self) -> f64 {
        self.timebase.clip_to_seconds(self.window.max_duration_clips)
    }

    pub fn validate(&self) -> Result<()> {
        self.timebase.validate()?;
        self.window.validate()?;
        self.bmn(self.synth.feature_dim).validate()?;
        self.train.validate()?;
        self.nms.validate()?;
        self.fusion.validate()?;
        self.synth.validate(&self.timebase, self.max_segment_s())?;
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(
                "eval thresholds must be a non-empty list in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Defaults, overlaid with `file` (if any), then each `key.path=value`
    /// override in order. Values are parsed as TOML, falling back to a bare
    /// string.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(PipelineConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, toml::Value::Table(layer));
        }
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: PipelineConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }
}

fn merge(dst: &mut toml::Value, src: toml::Value) {
    match (dst, src) {
        (toml::Value::Table(d), toml::Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{entry}` is not of the form key.path=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.trim().split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !table.contains_key(*key) {
                return Err(Error::Config(format!("override `{path}`: unknown key `{key}`")));
            }
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("override `{path}`: unknown key `{key}`")))?;
    }
    Ok(())
}
