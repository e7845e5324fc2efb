use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{BmnConfig, CandidateMap, ModelParams, SamplingWeights};
use crate::error::{Error, Result};

/// Supervision settings for the two candidate maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Cells with gIoU above this are positives for the classification map.
    pub positive_iou: f64,
    /// Cells with gIoU below this are negatives.
    pub negative_iou: f64,
    /// Weight of the classification term relative to the regression term.
    pub cls_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.9,
            negative_iou: 0.3,
            cls_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.negative_iou)
            || !(0.0..=1.0).contains(&self.positive_iou)
            || self.negative_iou > self.positive_iou
        {
            return Err(Error::Config(format!(
                "label thresholds must satisfy 0 <= negative_iou ({}) <= positive_iou ({}) <= 1",
                self.negative_iou, self.positive_iou
            )));
        }
        if !(self.cls_weight >= 0.0 && self.cls_weight.is_finite()) {
            return Err(Error::Config(format!(
                "cls_weight must be >= 0, got {}",
                self.cls_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub cls: CandidateMap,
    pub reg: CandidateMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
}

/// Intermediate activations kept for the backward pass. All buffers are
/// row-major.
struct Activations {
    x: Vec<f64>,
    /// `L x H` after the first convolution and tanh.
    h1: Vec<f64>,
    /// `L x H` after the second convolution and tanh.
    h2: Vec<f64>,
    /// Candidate features after the sample-axis reduction and tanh, on a
    /// zero-padded `(D + 2) x (L + 2)` grid (see [`Grid`]); zero on invalid cells.
    rpad: Array2<f64>,
    /// `cells x Hm` map-stage outputs after tanh; zero on invalid cells.
    z: Vec<f64>,
    cls_logit: Vec<f64>,
    reg_logit: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_inputs(params: &ModelParams, sampling: &SamplingWeights, features: &ArrayView2<'_, f64>) -> Result<()> {
    let cfg = &params.cfg;
    if sampling.config().window_len != cfg.window_len
        || sampling.config().max_duration != cfg.max_duration
        || sampling.config().num_samples != cfg.num_samples
    {
        return Err(Error::Shape(format!(
            "sampling weights built for L={} D={} N_s={}, model expects L={} D={} N_s={}",
            sampling.config().window_len,
            sampling.config().max_duration,
            sampling.config().num_samples,
            cfg.window_len,
            cfg.max_duration,
            cfg.num_samples
        )));
    }
    if features.dim() != (cfg.window_len, cfg.feature_dim) {
        return Err(Error::Shape(format!(
            "window features are {}x{}, model expects {}x{}",
            features.nrows(),
            features.ncols(),
            cfg.window_len,
            cfg.feature_dim
        )));
    }
    Ok(())
}

/// Same-length temporal convolution, kernel 3, zero padding; accumulates into `out`.
fn conv1d(input: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize, len: usize, out: &mut [f64]) {
    for t in 0..len {
        let dst = &mut out[t * cout..(t + 1) * cout];
        dst.copy_from_slice(b);
        for k in 0..3 {
            let Some(tt) = (t + k).checked_sub(1).filter(|&tt| tt < len) else {
                continue;
            };
            let src = &input[tt * cin..(tt + 1) * cin];
            for (o, acc) in dst.iter_mut().enumerate() {
                let wo = &w[o * cin * 3..(o + 1) * cin * 3];
                let mut sum = 0.0;
                for (c, x) in src.iter().enumerate() {
                    sum += wo[c * 3 + k] * x;
                }
                *acc += sum;
            }
        }
    }
}

/// Backward of [`conv1d`]; `din` may be `None` for the first layer.
#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    input: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    len: usize,
    dpre: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    for t in 0..len {
        let g = &dpre[t * cout..(t + 1) * cout];
        for (o, gv) in g.iter().enumerate() {
            db[o] += gv;
        }
        for k in 0..3 {
            let Some(tt) = (t + k).checked_sub(1).filter(|&tt| tt < len) else {
                continue;
            };
            let src = &input[tt * cin..(tt + 1) * cin];
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let base = o * cin * 3;
                for (c, x) in src.iter().enumerate() {
                    dw[base + c * 3 + k] += gv * x;
                }
                if let Some(din) = din.as_deref_mut() {
                    let dst = &mut din[tt * cin..(tt + 1) * cin];
                    for (c, d) in dst.iter_mut().enumerate() {
                        *d += gv * w[base + c * 3 + k];
                    }
                }
            }
        }
    }
}

/// Map-stage weights reordered to `[a][b][c][o]` so the output channel is innermost.
fn map_weights_by_offset(params: &ModelParams) -> Vec<f64> {
    let hm = params.cfg.hidden_map;
    let mut wt = vec![0.0; 9 * hm * hm];
    for ((o, c, a, b), &v) in params.map_w.indexed_iter() {
        wt[((a * 3 + b) * hm + c) * hm + o] = v;
    }
    wt
}

/// Sample-reduction weights reordered to `[j][h][o]`.
fn sample_weights_by_point(params: &ModelParams) -> Vec<f64> {
    let (h, hm, ns) = (params.cfg.hidden_base, params.cfg.hidden_map, params.cfg.num_samples);
    let mut wt = vec![0.0; ns * h * hm];
    for ((o, c, j), &v) in params.sample_w.indexed_iter() {
        wt[(j * h + c) * hm + o] = v;
    }
    wt
}

/// Row layout for the 3x3 map convolution. Cell `(d, s)` is stored at row
/// `(d + 1) * P + s + 1` of a zero-padded grid with row pitch `P = L + 2`, and
/// its convolution output at row `d * P + s`. The neighbour at stencil offset
/// `(a, b)` is then input row `d * P + s + a * P + b`, so each offset is one
/// contiguous matrix product over all cells at once.
struct Grid {
    pitch: usize,
    /// Output rows, `D * P`.
    out_rows: usize,
}

impl Grid {
    fn new(cfg: &BmnConfig) -> Self {
        let pitch = cfg.window_len + 2;
        Self {
            pitch,
            out_rows: cfg.max_duration * pitch,
        }
    }

    fn input_rows(&self) -> usize {
        self.out_rows + 2 * self.pitch + 2
    }

    fn input(&self, d: usize, s: usize) -> usize {
        (d + 1) * self.pitch + s + 1
    }

    fn output(&self, d: usize, s: usize) -> usize {
        d * self.pitch + s
    }

    fn shift(&self, off: usize) -> usize {
        (off / 3) * self.pitch + off % 3
    }
}

/// Projects every clip through each sample point's reduction weights, giving
/// `N_s x L x Hm`. Reducing the contracted candidate features over `(j, h)`
/// equals interpolating these projections, which avoids materializing the
/// `(D, L, N_s, H)` tensor.
fn project(h2: &Array2<f64>, wt: &[f64], ns: usize, hm: usize) -> Array2<f64> {
    let (l, h) = h2.dim();
    let mut proj = Array2::zeros((ns * l, hm));
    for j in 0..ns {
        let w = ArrayView2::from_shape((h, hm), &wt[j * h * hm..(j + 1) * h * hm]).unwrap();
        general_mat_mul(1.0, h2, &w, 0.0, &mut proj.slice_mut(s![j * l..(j + 1) * l, ..]));
    }
    proj
}

/// For duration `d + 1`, the valid starts `0..n` split into `0..m`, whose
/// sample `j` interpolates clips `s + fl` and `s + fl + 1`, and `m..n`, whose
/// sample sits on the last clip.
fn interp_ranges(l: usize, d: usize, fl: usize) -> (usize, usize) {
    let n = l - d;
    (n.min((l - 1).saturating_sub(fl)), n)
}

fn run_forward(params: &ModelParams, sampling: &SamplingWeights, features: ArrayView2<'_, f64>) -> Activations {
    let cfg = &params.cfg;
    let (l, c, h, hm) = (cfg.window_len, cfg.feature_dim, cfg.hidden_base, cfg.hidden_map);
    let cells = cfg.num_cells();
    let x: Vec<f64> = features.iter().copied().collect();

    let mut h1 = vec![0.0; l * h];
    conv1d(
        &x,
        c,
        params.conv1_w.as_slice().unwrap(),
        params.conv1_b.as_slice().unwrap(),
        h,
        l,
        &mut h1,
    );
    h1.iter_mut().for_each(|v| *v = v.tanh());
    let mut h2 = vec![0.0; l * h];
    conv1d(
        &h1,
        h,
        params.conv2_w.as_slice().unwrap(),
        params.conv2_b.as_slice().unwrap(),
        h,
        l,
        &mut h2,
    );
    h2.iter_mut().for_each(|v| *v = v.tanh());

    let ns = cfg.num_samples;
    let h2_arr = Array2::from_shape_vec((l, h), h2).expect("hidden shape");
    let proj = project(&h2_arr, &sample_weights_by_point(params), ns, hm);
    let proj = proj.as_slice().unwrap();
    let grid = Grid::new(cfg);
    let mut rpad = Array2::zeros((grid.input_rows(), hm));
    {
        let flat = rpad.as_slice_mut().unwrap();
        for d in 0..cfg.max_duration {
            let base = grid.input(d, 0) * hm;
            let n = l - d;
            let rows = &mut flat[base..base + n * hm];
            for row in rows.chunks_exact_mut(hm) {
                row.copy_from_slice(params.sample_b.as_slice().unwrap());
            }
            for (j, &(fl, frac)) in sampling.offsets(d).iter().enumerate() {
                let pj = &proj[j * l * hm..(j + 1) * l * hm];
                let (m, n) = interp_ranges(l, d, fl);
                if m > 0 {
                    let lo = &pj[fl * hm..(fl + m) * hm];
                    let hi = &pj[(fl + 1) * hm..(fl + 1 + m) * hm];
                    for ((a, p), q) in rows[..m * hm].iter_mut().zip(lo).zip(hi) {
                        *a += (1.0 - frac) * p + frac * q;
                    }
                }
                let last = &pj[(l - 1) * hm..];
                for row in rows[m * hm..n * hm].chunks_exact_mut(hm) {
                    row.iter_mut().zip(last).for_each(|(a, p)| *a += p);
                }
            }
            rows.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    let h2 = h2_arr.into_raw_vec_and_offset().0;

    let wt = map_weights_by_offset(params);
    let mut zpre = Array2::zeros((grid.out_rows, hm));
    for off in 0..9 {
        let shift = grid.shift(off);
        let w = ArrayView2::from_shape((hm, hm), &wt[off * hm * hm..(off + 1) * hm * hm]).unwrap();
        general_mat_mul(
            1.0,
            &rpad.slice(s![shift..shift + grid.out_rows, ..]),
            &w,
            1.0,
            &mut zpre,
        );
    }
    let map_b = params.map_b.as_slice().unwrap();
    let mut z = vec![0.0; cells * hm];
    let mut cls_logit = vec![0.0; cells];
    let mut reg_logit = vec![0.0; cells];
    for d in 0..cfg.max_duration {
        for s in 0..l {
            if !cfg.is_valid_candidate(d, s) {
                break;
            }
            let cell = d * l + s;
            let acc = &mut z[cell * hm..(cell + 1) * hm];
            for ((a, pre), b) in acc.iter_mut().zip(zpre.row(grid.output(d, s))).zip(map_b) {
                *a = (pre + b).tanh();
            }
            cls_logit[cell] = params.cls_b[0] + acc.iter().zip(&params.cls_w).map(|(a, w)| a * w).sum::<f64>();
            reg_logit[cell] = params.reg_b[0] + acc.iter().zip(&params.reg_w).map(|(a, w)| a * w).sum::<f64>();
        }
    }
    Activations {
        x,
        h1,
        h2,
        rpad,
        z,
        cls_logit,
        reg_logit,
    }
}

fn to_map(cfg: &BmnConfig, logits: &[f64]) -> CandidateMap {
    let values = Array2::from_shape_fn((cfg.max_duration, cfg.window_len), |(d, s)| {
        if cfg.is_valid_candidate(d, s) {
            sigmoid(logits[d * cfg.window_len + s])
        } else {
            0.0
        }
    });
    CandidateMap::from_values(values)
}

/// Classification and regression maps for one window. Valid cells lie in
/// `(0, 1)`; invalid cells are exactly 0.
pub fn forward(
    params: &ModelParams,
    sampling: &SamplingWeights,
    window_features: ArrayView2<'_, f64>,
) -> Result<ForwardOutput> {
    check_inputs(params, sampling, &window_features)?;
    let act = run_forward(params, sampling, window_features);
    Ok(ForwardOutput {
        cls: to_map(&params.cfg, &act.cls_logit),
        reg: to_map(&params.cfg, &act.reg_logit),
    })
}

/// Loss `L_reg + cls_weight * L_cls` over valid cells and its exact gradient.
///
/// `L_reg` is the mean squared error of the regression map against the gIoU
/// map. `L_cls` is binary cross-entropy on the classification map where
/// positives (`gIoU > positive_iou`) and negatives (`gIoU < negative_iou`)
/// each carry half of the total weight; if only one class is present it
/// carries all of it, and with neither present the term is 0.
pub fn loss_and_grad(
    params: &ModelParams,
    sampling: &SamplingWeights,
    window_features: ArrayView2<'_, f64>,
    giou: &CandidateMap,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    check_inputs(params, sampling, &window_features)?;
    let cfg = &params.cfg;
    if giou.values().dim() != (cfg.max_duration, cfg.window_len) {
        return Err(Error::Shape(format!(
            "gIoU map is {:?}, model expects ({}, {})",
            giou.values().dim(),
            cfg.max_duration,
            cfg.window_len
        )));
    }
    let (l, c, h, hm) = (cfg.window_len, cfg.feature_dim, cfg.hidden_base, cfg.hidden_map);
    let cells = cfg.num_cells();
    let act = run_forward(params, sampling, window_features);

    let num_valid = giou.num_valid() as f64;
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for (_, _, g) in giou.valid_cells() {
        if g > loss_cfg.positive_iou {
            n_pos += 1;
        } else if g < loss_cfg.negative_iou {
            n_neg += 1;
        }
    }
    let (w_pos, w_neg) = match (n_pos, n_neg) {
        (0, 0) => (0.0, 0.0),
        (p, 0) => (1.0 / p as f64, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };

    let mut loss = LossBreakdown::default();
    let mut d_cls = vec![0.0; cells];
    let mut d_reg = vec![0.0; cells];
    for (d, s, g) in giou.valid_cells() {
        let cell = d * l + s;
        let r = sigmoid(act.reg_logit[cell]);
        loss.reg += (r - g) * (r - g) / num_valid;
        d_reg[cell] = 2.0 * (r - g) / num_valid * r * (1.0 - r);

        let zl = act.cls_logit[cell];
        let p = sigmoid(zl);
        if g > loss_cfg.positive_iou {
            loss.cls += w_pos * softplus(-zl);
            d_cls[cell] = loss_cfg.cls_weight * -w_pos * (1.0 - p);
        } else if g < loss_cfg.negative_iou {
            loss.cls += w_neg * softplus(zl);
            d_cls[cell] = loss_cfg.cls_weight * w_neg * p;
        }
    }
    loss.total = loss.reg + loss_cfg.cls_weight * loss.cls;

    let mut grads = params.zeros_like();
    let grid = Grid::new(cfg);
    let mut dzpre = Array2::zeros((grid.out_rows, hm));
    for d in 0..cfg.max_duration {
        for s in 0..l {
            if !cfg.is_valid_candidate(d, s) {
                break;
            }
            let cell = d * l + s;
            let (gc, gr) = (d_cls[cell], d_reg[cell]);
            if gc == 0.0 && gr == 0.0 {
                continue;
            }
            grads.cls_b[0] += gc;
            grads.reg_b[0] += gr;
            let zc = &act.z[cell * hm..(cell + 1) * hm];
            let mut dpre = dzpre.row_mut(grid.output(d, s));
            for o in 0..hm {
                grads.cls_w[o] += gc * zc[o];
                grads.reg_w[o] += gr * zc[o];
                let dz = gc * params.cls_w[o] + gr * params.reg_w[o];
                dpre[o] = dz * (1.0 - zc[o] * zc[o]);
                grads.map_b[o] += dpre[o];
            }
        }
    }
    let wt = map_weights_by_offset(params);
    let mut dwt = vec![0.0; wt.len()];
    let mut drpad = Array2::zeros((grid.input_rows(), hm));
    for off in 0..9 {
        let shift = grid.shift(off);
        let rows = shift..shift + grid.out_rows;
        let w = ArrayView2::from_shape((hm, hm), &wt[off * hm * hm..(off + 1) * hm * hm]).unwrap();
        let mut dw =
            ndarray::ArrayViewMut2::from_shape((hm, hm), &mut dwt[off * hm * hm..(off + 1) * hm * hm]).unwrap();
        general_mat_mul(1.0, &act.rpad.slice(s![rows.clone(), ..]).t(), &dzpre, 0.0, &mut dw);
        general_mat_mul(1.0, &dzpre, &w.t(), 1.0, &mut drpad.slice_mut(s![rows, ..]));
    }
    for ((o, ch, a, b), g) in grads.map_w.indexed_iter_mut() {
        *g = dwt[((a * 3 + b) * hm + ch) * hm + o];
    }

    // back through the sample-axis reduction and the contraction
    let ns = cfg.num_samples;
    let mut dproj = Array2::<f64>::zeros((ns * l, hm));
    {
        let dflat = dproj.as_slice_mut().unwrap();
        let rflat = act.rpad.as_slice().unwrap();
        let gflat = drpad.as_slice_mut().unwrap();
        for d in 0..cfg.max_duration {
            let base = grid.input(d, 0) * hm;
            let n = l - d;
            let g = &mut gflat[base..base + n * hm];
            for (gv, y) in g.iter_mut().zip(&rflat[base..base + n * hm]) {
                *gv *= 1.0 - y * y;
            }
            for row in g.chunks_exact(hm) {
                grads.sample_b.iter_mut().zip(row).for_each(|(db, gv)| *db += gv);
            }
            for (j, &(fl, frac)) in sampling.offsets(d).iter().enumerate() {
                let dj = &mut dflat[j * l * hm..(j + 1) * l * hm];
                let (m, n) = interp_ranges(l, d, fl);
                if m > 0 {
                    for (a, gv) in dj[fl * hm..(fl + m) * hm].iter_mut().zip(&g[..m * hm]) {
                        *a += (1.0 - frac) * gv;
                    }
                    for (b, gv) in dj[(fl + 1) * hm..(fl + 1 + m) * hm].iter_mut().zip(&g[..m * hm]) {
                        *b += frac * gv;
                    }
                }
                let (_, last) = dj.split_at_mut((l - 1) * hm);
                for row in g[m * hm..n * hm].chunks_exact(hm) {
                    last.iter_mut().zip(row).for_each(|(a, gv)| *a += gv);
                }
            }
        }
    }
    let swt = sample_weights_by_point(params);
    let mut dswt = vec![0.0; swt.len()];
    let h2 = ArrayView2::from_shape((l, h), &act.h2).unwrap();
    let mut dh2 = Array2::<f64>::zeros((l, h));
    for j in 0..ns {
        let gj = dproj.slice(s![j * l..(j + 1) * l, ..]);
        let w = ArrayView2::from_shape((h, hm), &swt[j * h * hm..(j + 1) * h * hm]).unwrap();
        let mut dw = ndarray::ArrayViewMut2::from_shape((h, hm), &mut dswt[j * h * hm..(j + 1) * h * hm]).unwrap();
        general_mat_mul(1.0, &h2.t(), &gj, 0.0, &mut dw);
        general_mat_mul(1.0, &gj, &w.t(), 1.0, &mut dh2);
    }
    let mut dh2 = dh2.into_raw_vec_and_offset().0;
    for ((o, c, j), g) in grads.sample_w.indexed_iter_mut() {
        *g = dswt[(j * h + c) * hm + o];
    }

    for (g, y) in dh2.iter_mut().zip(&act.h2) {
        *g *= 1.0 - y * y;
    }
    let mut dh1 = vec![0.0; l * h];
    conv1d_backward(
        &act.h1,
        h,
        params.conv2_w.as_slice().unwrap(),
        h,
        l,
        &dh2,
        grads.conv2_w.as_slice_mut().unwrap(),
        grads.conv2_b.as_slice_mut().unwrap(),
        Some(&mut dh1),
    );
    for (g, y) in dh1.iter_mut().zip(&act.h1) {
        *g *= 1.0 - y * y;
    }
    conv1d_backward(
        &act.x,
        c,
        params.conv1_w.as_slice().unwrap(),
        h,
        l,
        &dh1,
        grads.conv1_w.as_slice_mut().unwrap(),
        grads.conv1_b.as_slice_mut().unwrap(),
        None,
    );
    Ok((loss, grads))
}
