//! AdamW with a cosine learning-rate schedule, and the training loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmn::{loss_and_grad, BmnConfig, CandidateMap, LossConfig, ModelParams, SamplingWeights};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            epochs: 10,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            // small batches: the 10-epoch schedule needs enough steps to converge
            batch_size: 2,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be non-negative, got {}",
                self.base_lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "eps must be positive and weight_decay non-negative".into(),
            ));
        }
        self.loss.validate()
    }
}

/// `base_lr * (1 + cos(pi * progress)) / 2`.
pub fn cosine_lr(progress: f64, base_lr: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update. Weight decay is applied directly to the parameters
/// before the moment-based step. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (block, g) in grads.blocks() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in blocks {
        for i in 0..p.len() {
            p[i] -= lr * cfg.weight_decay * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One supervised window.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub features: Array2<f64>,
    pub giou: CandidateMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub log: Vec<StepRecord>,
}

/// Parameters drawn from the configured seed; `train` starts from exactly these.
pub fn init_params(bmn: &BmnConfig, seed: u64) -> ModelParams {
    ModelParams::init(bmn, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean loss and gradient over a batch. Per-window work may run in parallel;
/// the reduction runs in batch order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    sampling: &SamplingWeights,
    batch: &[&TrainingWindow],
    loss_cfg: &LossConfig,
    exec: Execution,
) -> Result<(f64, ModelParams)> {
    let results = exec.map(batch, |w| {
        loss_and_grad(params, sampling, w.features.view(), &w.giou, loss_cfg)
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l.total * scale;
        total.add_scaled(&g, scale);
    }
    Ok((loss, total))
}

pub fn train(
    dataset: &[TrainingWindow],
    bmn: &BmnConfig,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training set has no windows".into()));
    }
    bmn.validate()?;
    cfg.validate()?;
    let sampling = SamplingWeights::build(bmn);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(bmn, &mut rng);
    let mut state = OptState::new(&params);

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingWindow> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&params, &sampling, &batch, &cfg.loss, exec)?;
            let lr = cosine_lr(step as f64 / total_steps, cfg.base_lr);
            adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
            epoch_loss += loss * chunk.len() as f64;
            let rec = StepRecord { epoch, step, lr, loss };
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmn::BmnConfig;
    use proptest::prelude::*;

    fn tiny() -> BmnConfig {
        BmnConfig {
            window_len: 10,
            max_duration: 4,
            num_samples: 3,
            feature_dim: 2,
            hidden_base: 3,
            hidden_map: 3,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0.0, 0.002), 0.002);
        assert!(cosine_lr(1.0, 0.002).abs() < 1e-18);
        assert!((cosine_lr(0.5, 0.002) - 0.001).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_is_non_increasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cosine_lr(lo, 0.002) >= cosine_lr(hi, 0.002));
        }
    }

    fn scalar_params(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(&tiny());
        p.cls_b[0] = v;
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = init_params(&tiny(), 5);
        let before = p.clone();
        let mut st = OptState::new(&p);
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for g in [3.0, -0.02] {
            let mut p = scalar_params(0.5);
            let mut grads = p.zeros_like();
            grads.cls_b[0] = g;
            let mut st = OptState::new(&p);
            adamw_step(&mut p, &grads, &mut st, 0.01, &cfg).unwrap();
            // m_hat = g, v_hat = g^2 after bias correction
            let expect = 0.5 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((p.cls_b[0] - expect).abs() < 1e-15);
            assert!((p.cls_b[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn pure_decay() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(1.0);
        let mut st = OptState::new(&p);
        let zero = p.zeros_like();
        adamw_step(&mut p, &zero, &mut st, 0.01, &cfg).unwrap();
        assert!((p.cls_b[0] - 0.999).abs() < 1e-15);
        assert!(st.m.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
        assert!(st.v.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = init_params(&tiny(), 1);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.map_w[[0, 1, 2, 0]] = f64::NAN;
        let mut st = OptState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, 0.01, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("map_w"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    /// Textbook Adam written independently of `adamw_step`.
    fn reference_adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64, c: &TrainConfig) {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i].powi(2);
            let mh = m[i] / (1.0 - c.beta1.powi(t));
            let vh = v[i] / (1.0 - c.beta2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }

    #[test]
    fn matches_plain_adam_without_decay() {
        use rand::Rng;
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_params(&tiny(), 2);
        let mut st = OptState::new(&p);
        let mut flat: Vec<f64> = p.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
        let mut m = vec![0.0; flat.len()];
        let mut v = vec![0.0; flat.len()];
        for t in 1..=5 {
            let mut g = p.zeros_like();
            for (_, b) in g.blocks_mut() {
                b.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            }
            let gf: Vec<f64> = g.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
            adamw_step(&mut p, &g, &mut st, 0.003, &cfg).unwrap();
            reference_adam(&mut flat, &gf, &mut m, &mut v, t, 0.003, &cfg);
        }
        let got: Vec<f64> = p.blocks().iter().flat_map(|(_, b)| b.to_vec()).collect();
        for (a, b) in got.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn toy_window(seed: u64) -> TrainingWindow {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let giou = CandidateMap::from_values(Array2::from_shape_fn((4, 10), |_| rng.random_range(0.0..1.0)));
        TrainingWindow { features, giou }
    }

    #[test]
    fn zero_learning_rate_returns_initialization() {
        let cfg = TrainConfig {
            base_lr: 0.0,
            epochs: 1,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&[toy_window(1)], &tiny(), &cfg, Execution::Sequential, |_| {}).unwrap();
        assert_eq!(out.params, init_params(&tiny(), 4));
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train(&[], &tiny(), &TrainConfig::default(), Execution::Sequential, |_| {}).is_err());
    }

    #[test]
    fn parallel_and_sequential_training_agree_bitwise() {
        let data: Vec<_> = (0..7).map(toy_window).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(&data, &tiny(), &cfg, Execution::Sequential, |_| {}).unwrap();
        let b = train(&data, &tiny(), &cfg, Execution::Parallel, |_| {}).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 6);
    }
}
