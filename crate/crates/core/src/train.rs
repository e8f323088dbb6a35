//! Loss, optimizer, metrics, the training loop and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::cell::GraphControl;
use crate::dataset::{NormStats, PreparedData, WindowSample};
use crate::error::{Error, Result};
use crate::seq2seq::{Adgcrnn, Batch, SamplingSchedule};
use crate::tensor::Tensor;

/// Mean of `|pred - target|` over entries where `mask == 1`.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() || target.shape() != mask.shape() {
        return Err(Error::shape(
            "mae_loss",
            format!(
                "pred {:?}, target {:?}, mask {:?}",
                tape.shape(pred),
                target.shape(),
                mask.shape()
            ),
        ));
    }
    let observed = mask.data().iter().filter(|&&m| m != 0.0).count();
    if observed == 0 {
        return Err(Error::Validation("mae_loss: mask selects no entries".into()));
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(mask.clone());
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, m)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / observed as f64))
}

/// Per-horizon and aggregate errors on the original (de-normalized) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub horizon_mae: Vec<f64>,
    pub horizon_rmse: Vec<f64>,
    pub horizon_count: Vec<usize>,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Running sums behind a [`MetricReport`]. Merging accumulators in a fixed
/// order gives the same result regardless of how the work was divided.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
}

impl ErrorAccumulator {
    pub fn new(horizon: usize) -> Self {
        ErrorAccumulator {
            abs: vec![0.0; horizon],
            sq: vec![0.0; horizon],
            count: vec![0; horizon],
        }
    }

    /// Adds one `[T, N]` (or `[B, T, N]`) block of de-normalized values.
    pub fn add(&mut self, pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() || pred.shape() != mask.shape() || pred.rank() < 2 {
            return Err(Error::shape(
                "metrics",
                format!(
                    "pred {:?}, target {:?}, mask {:?}",
                    pred.shape(),
                    target.shape(),
                    mask.shape()
                ),
            ));
        }
        let rank = pred.rank();
        let (horizon, n) = (pred.shape()[rank - 2], pred.shape()[rank - 1]);
        if horizon != self.abs.len() {
            return Err(Error::shape(
                "metrics",
                format!("horizon {horizon} vs {}", self.abs.len()),
            ));
        }
        let rows = pred
            .data()
            .chunks(n)
            .zip(target.data().chunks(n))
            .zip(mask.data().chunks(n));
        for (r, ((p, t), m)) in rows.enumerate() {
            let tau = r % horizon;
            for ((pv, tv), mv) in p.iter().zip(t).zip(m) {
                if *mv == 0.0 {
                    continue;
                }
                let e = pv - tv;
                self.abs[tau] += e.abs();
                self.sq[tau] += e * e;
                self.count[tau] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ErrorAccumulator) {
        for i in 0..self.abs.len() {
            self.abs[i] += other.abs[i];
            self.sq[i] += other.sq[i];
            self.count[i] += other.count[i];
        }
    }

    pub fn report(&self) -> MetricReport {
        let ratio = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        let count: usize = self.count.iter().sum();
        MetricReport {
            horizon_mae: self.abs.iter().zip(&self.count).map(|(&s, &c)| ratio(s, c)).collect(),
            horizon_rmse: self
                .sq
                .iter()
                .zip(&self.count)
                .map(|(&s, &c)| libm::sqrt(ratio(s, c)))
                .collect(),
            horizon_count: self.count.clone(),
            mae: ratio(self.abs.iter().sum(), count),
            rmse: libm::sqrt(ratio(self.sq.iter().sum(), count)),
            count,
        }
    }
}

/// De-normalizes `pred` and `target` with `stats` and reports MAE/RMSE per
/// horizon over observed entries. Tensors are `[T, N]` or `[B, T, N]`.
pub fn metrics(pred: &Tensor, target: &Tensor, mask: &Tensor, stats: &NormStats) -> Result<MetricReport> {
    let horizon = pred.shape().get(pred.rank().wrapping_sub(2)).copied().unwrap_or(0);
    let mut acc = ErrorAccumulator::new(horizon);
    acc.add(&stats.invert(pred), &stats.invert(target), mask)?;
    Ok(acc.report())
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = p.value.data_mut();
            for (((w, g), mi), vi) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Scheduled-sampling decay constant.
    pub tau: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Batch size used for validation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            tau: 2000.0,
            seed: 0,
            patience: 15,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        SamplingSchedule::new(self.tau).map(|_| ())
    }

    /// Optimizer steps performed over the whole run for `n_train` windows.
    pub fn total_iterations(&self, n_train: usize) -> u64 {
        (self.epochs * n_train.div_ceil(self.batch_size)) as u64
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean masked MAE on the normalized scale over the epoch's batches.
    pub train_loss: f64,
    /// Autoregressive validation MAE on the original scale.
    pub val_mae: f64,
    pub val_rmse: f64,
    /// Teacher-forcing probability at the epoch's last iteration.
    pub epsilon: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainStatus {
    Completed,
    EarlyStopped {
        epoch: usize,
    },
    /// A non-finite loss was hit; parameters are the last finite best.
    Diverged {
        epoch: usize,
        iteration: u64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub status: TrainStatus,
}

/// Stacks the windows anchored at `anchors`.
pub fn make_batch(data: &PreparedData, anchors: &[usize]) -> Result<Batch> {
    let samples: Vec<WindowSample> = anchors.iter().map(|&t| data.sample(t)).collect::<Result<_>>()?;
    Batch::from_samples(&samples)
}

/// Trains `params` in place.
///
/// Each epoch shuffles the training anchors, takes minibatch steps with
/// teacher-forcing probability `ε_i` from the sampling schedule, clips the
/// global gradient norm and applies Adam. Validation MAE is measured after
/// every epoch; the best parameters are restored at the end. The run is
/// fully determined by `cfg.seed`.
pub fn train(
    model: &Adgcrnn,
    params: &mut ParamStore,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.n_nodes() != model.config.n_nodes
        || data.resolution.history != model.config.history
        || data.resolution.horizon != model.config.horizon
    {
        return Err(Error::Config(
            "dataset shape does not match the model configuration".into(),
        ));
    }
    let schedule = SamplingSchedule::new(cfg.tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params, cfg.learning_rate);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut iteration: u64 = 0;
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order = data.anchors.train.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_weight) = (0.0, 0usize);
        let mut eps = schedule.eps_at(iteration);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(data, chunk)?;
            eps = schedule.eps_at(iteration);
            let coin_seed: u64 = rng.random();
            iteration += 1;
            if batch.y_mask.data().iter().all(|&m| m == 0.0) {
                continue;
            }
            params.zero_grad();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, params, &batch, eps, coin_seed, &mut GraphControl::default())?;
            let loss = mae_loss(&mut tape, out.prediction, &batch.y, &batch.y_mask)?;
            let value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, iteration {iteration}");
                status = TrainStatus::Diverged { epoch, iteration };
                break 'epochs;
            }
            tape.backward(loss, params)?;
            params.clip_grad_norm(cfg.clip_norm);
            adam.step(params);
            loss_sum += value * chunk.len() as f64;
            loss_weight += chunk.len();
        }
        let val = evaluate(model, params, data, &data.anchors.val, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: if loss_weight > 0 {
                loss_sum / loss_weight as f64
            } else {
                0.0
            },
            val_mae: val.mae,
            val_rmse: val.rmse,
            epsilon: eps,
            iterations: iteration,
        };
        on_epoch(&record);
        history.push(record);
        if !val.mae.is_finite() {
            status = TrainStatus::Diverged { epoch, iteration };
            break;
        }
        if val.mae < best_val {
            best_val = val.mae;
            best_epoch = Some(epoch);
            best.clone_from(params);
        } else if cfg.patience > 0 && best_epoch.is_some_and(|b| epoch - b >= cfg.patience) {
            status = TrainStatus::EarlyStopped { epoch };
            break;
        }
    }
    if best_epoch.is_some() || matches!(status, TrainStatus::Diverged { .. }) {
        params.clone_from(&best);
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mae: best_epoch.map(|_| best_val),
        status,
    })
}

/// Autoregressive (`ε = 0`) accuracy on the windows at `anchors`.
pub fn evaluate(
    model: &Adgcrnn,
    params: &ParamStore,
    data: &PreparedData,
    anchors: &[usize],
    batch_size: usize,
) -> Result<MetricReport> {
    evaluate_with(model, params, data, anchors, batch_size, |_, _| {})
}

/// Like [`evaluate`], also handing every de-normalized `[T, N]` forecast to
/// `on_forecast` together with its anchor.
pub fn evaluate_with(
    model: &Adgcrnn,
    params: &ParamStore,
    data: &PreparedData,
    anchors: &[usize],
    batch_size: usize,
    mut on_forecast: impl FnMut(usize, &Tensor),
) -> Result<MetricReport> {
    let mut total = ErrorAccumulator::new(model.config.horizon);
    for chunk in anchors.chunks(batch_size.max(1)) {
        total.merge(&evaluate_batch(model, params, data, chunk, &mut on_forecast)?);
    }
    Ok(total.report())
}

/// Errors of a single batch of windows.
///
/// Merging per-batch accumulators in anchor order reproduces [`evaluate`]
/// exactly, however the batches were distributed among workers.
pub fn evaluate_batch(
    model: &Adgcrnn,
    params: &ParamStore,
    data: &PreparedData,
    anchors: &[usize],
    on_forecast: &mut dyn FnMut(usize, &Tensor),
) -> Result<ErrorAccumulator> {
    let mut acc = ErrorAccumulator::new(model.config.horizon);
    let batch = make_batch(data, anchors)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, params, &batch, 0.0, 0, &mut GraphControl::default())?;
    let pred = data.stats.invert(tape.value(out.prediction));
    let target = data.stats.invert(&batch.y);
    acc.add(&pred, &target, &batch.y_mask)?;
    for (i, &anchor) in anchors.iter().enumerate() {
        on_forecast(anchor, &pred.index_leading(i));
    }
    Ok(acc)
}
