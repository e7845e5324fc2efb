use ndarray::{Array2, Array4, ArrayView2};

use super::BmnConfig;
use crate::exec::Execution;

/// Linear-interpolation weights mapping clip features to candidate sample
/// points.
///
/// Logically a dense `(D, L, N_s, L)` tensor. Sample point `j` of a candidate
/// starting at `s` lies at `s + j (d + 1) / (N_s - 1)`, so its offset from `s`
/// depends only on `(d, j)`; only those offsets are stored and rows are
/// derived on demand.
#[derive(Debug, Clone)]
pub struct SamplingWeights {
    cfg: BmnConfig,
    /// `(floor, frac)` of the offset of sample `j` for duration `d + 1`, at
    /// index `d * N_s + j`.
    offsets: Vec<(usize, f64)>,
}

impl SamplingWeights {
    pub fn build(cfg: &BmnConfig) -> Self {
        let ns = cfg.num_samples;
        let mut offsets = Vec::with_capacity(cfg.max_duration * ns);
        for d in 0..cfg.max_duration {
            let step = (d + 1) as f64 / (ns - 1) as f64;
            for j in 0..ns {
                let x = j as f64 * step;
                offsets.push((x.floor() as usize, x - x.floor()));
            }
        }
        Self { cfg: *cfg, offsets }
    }

    pub fn config(&self) -> &BmnConfig {
        &self.cfg
    }

    /// The nonzero entries of row `(d, s, j)` as `(clip, weight)` pairs.
    /// Rows of invalid candidates are all zero.
    pub fn row(&self, d: usize, s: usize, j: usize) -> [(usize, f64); 2] {
        if !self.cfg.is_valid_candidate(d, s) {
            return [(0, 0.0), (0, 0.0)];
        }
        let l = self.cfg.window_len;
        let (fl, frac) = self.offsets[d * self.cfg.num_samples + j];
        let i = s + fl;
        if i + 1 >= l {
            // at or beyond the last clip: all mass on clip L-1
            [(l - 1, 1.0), (l - 1, 0.0)]
        } else {
            [(i, 1.0 - frac), (i + 1, frac)]
        }
    }

    /// Entry `(d, s, j, t)` of the dense tensor.
    pub fn weight(&self, d: usize, s: usize, j: usize, t: usize) -> f64 {
        self.row(d, s, j).iter().filter(|(c, _)| *c == t).map(|(_, w)| w).sum()
    }

    /// Materializes the dense `(D, L, N_s, L)` tensor. Only sensible for
    /// small configurations.
    pub fn to_dense(&self) -> Array4<f64> {
        let c = &self.cfg;
        let mut out = Array4::zeros((c.max_duration, c.window_len, c.num_samples, c.window_len));
        for d in 0..c.max_duration {
            for s in 0..c.window_len {
                for j in 0..c.num_samples {
                    for (t, w) in self.row(d, s, j) {
                        out[[d, s, j, t]] += w;
                    }
                }
            }
        }
        out
    }

    /// Dense `(L * N_s) x L` weight block for all candidates of duration `d + 1`.
    pub fn duration_block(&self, d: usize) -> Array2<f64> {
        let (l, ns) = (self.cfg.window_len, self.cfg.num_samples);
        let mut block = Array2::zeros((l * ns, l));
        for s in 0..l {
            for j in 0..ns {
                for (t, w) in self.row(d, s, j) {
                    block[[s * ns + j, t]] += w;
                }
            }
        }
        block
    }

    /// Candidate features `(D, L, N_s, H)` for a hidden sequence `L x H`,
    /// computed as one matrix product per duration.
    pub fn candidate_features(&self, hidden: ArrayView2<'_, f64>, exec: Execution) -> Array4<f64> {
        let c = &self.cfg;
        assert_eq!(hidden.nrows(), c.window_len, "hidden sequence length");
        let h = hidden.ncols();
        let blocks = exec.map_range(c.max_duration, |d| self.duration_block(d).dot(&hidden));
        let mut out = Array4::zeros((c.max_duration, c.window_len, c.num_samples, h));
        for (d, prod) in blocks.into_iter().enumerate() {
            let prod = prod
                .into_shape_with_order((c.window_len, c.num_samples, h))
                .expect("block shape");
            out.index_axis_mut(ndarray::Axis(0), d).assign(&prod);
        }
        out
    }

    /// Offsets of the `N_s` sample points for duration `d + 1`.
    pub(crate) fn offsets(&self, d: usize) -> &[(usize, f64)] {
        let ns = self.cfg.num_samples;
        &self.offsets[d * ns..(d + 1) * ns]
    }
}
