//! A compact boundary-matching network.
//!
//! Clip features pass through two temporal convolutions, are contracted with
//! a fixed sampling-weight operator into one feature vector per candidate
//! `(duration, start)`, mixed by a 3x3 convolution over the candidate grid,
//! and scored by two logistic heads: a classification map and a regression
//! map. There is no boundary (start/end probability) branch.

mod labels;
mod network;
mod params;
mod sampling;

pub use labels::compute_giou_map;
pub use network::{forward, loss_and_grad, ForwardOutput, LossBreakdown, LossConfig};
pub use params::{read_checkpoint, write_checkpoint, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sampling::SamplingWeights;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmnConfig {
    /// Window length `L` in clips.
    pub window_len: usize,
    /// Longest candidate `D` in clips.
    pub max_duration: usize,
    /// Interpolation points per candidate.
    pub num_samples: usize,
    pub feature_dim: usize,
    pub hidden_base: usize,
    pub hidden_map: usize,
}

impl Default for BmnConfig {
    fn default() -> Self {
        Self {
            window_len: 200,
            max_duration: 100,
            num_samples: 32,
            feature_dim: 32,
            hidden_base: 8,
            hidden_map: 8,
        }
    }
}

impl BmnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_duration == 0 || self.max_duration > self.window_len {
            return Err(Error::Config(format!(
                "max_duration ({}) must be in 1..={} (window_len)",
                self.max_duration, self.window_len
            )));
        }
        if self.num_samples < 2 {
            return Err(Error::Config(format!(
                "num_samples must be at least 2, got {}",
                self.num_samples
            )));
        }
        if self.feature_dim == 0 || self.hidden_base == 0 || self.hidden_map == 0 {
            return Err(Error::Config("feature and hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Candidate `(d, s)` spans clips `[s, s + d + 1)`.
    pub fn is_valid_candidate(&self, d: usize, s: usize) -> bool {
        d < self.max_duration && s + d < self.window_len
    }

    pub fn num_cells(&self) -> usize {
        self.max_duration * self.window_len
    }
}

/// Values over the `(duration, start)` candidate grid. Row `d` holds
/// candidates lasting `d + 1` clips; invalid cells hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMap {
    values: Array2<f64>,
}

impl CandidateMap {
    pub fn zeros(max_duration: usize, window_len: usize) -> Self {
        Self {
            values: Array2::zeros((max_duration, window_len)),
        }
    }

    /// Wraps a `D x L` matrix, zeroing invalid cells.
    pub fn from_values(mut values: Array2<f64>) -> Self {
        let l = values.ncols();
        for ((d, s), v) in values.indexed_iter_mut() {
            if s + d >= l {
                *v = 0.0;
            }
        }
        Self { values }
    }

    pub fn max_duration(&self) -> usize {
        self.values.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_valid(&self, d: usize, s: usize) -> bool {
        d < self.max_duration() && s + d < self.window_len()
    }

    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn(self.values.dim(), |(d, s)| self.is_valid(d, s))
    }

    pub fn get(&self, d: usize, s: usize) -> f64 {
        self.values[[d, s]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Valid cells as `(d, s, value)`.
    pub fn valid_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let l = self.window_len();
        self.values
            .indexed_iter()
            .filter(move |((d, s), _)| s + d < l)
            .map(|((d, s), &v)| (d, s, v))
    }

    pub fn num_valid(&self) -> usize {
        let l = self.window_len();
        (0..self.max_duration()).map(|d| l.saturating_sub(d)).sum()
    }
}
