//! Adam training with step-decay learning rate, best-validation selection,
//! metric evaluation and reference predictors.

mod data;
pub mod metrics;
mod reference;

pub use data::{window_rows, Dataset};
pub use metrics::{MetricRow, MetricsReport};
pub use reference::{historical_average, persistence, reference_predictors, HistoricalAverage, ReferenceReports};

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::TpllmModel;
use crate::numerics::rng::stream;
use crate::numerics::kernels::clamp_below;
use crate::numerics::{s, Graph, ParamId, ParamStore, Scalar, Tensor};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay_factor: 0.5,
            decay_every: 100,
            batch_size: 16,
            epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.decay_every) as i32;
        self.learning_rate * self.decay_factor.powi(decays)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.decay_factor) || !positive(self.eps) {
            return Err(Error::Config(format!("optimizer settings must be positive: {self:?}")));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch size and decay period must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !positive(c) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Learning rate under the default schedule: `0.001 · 0.5^⌊epoch/100⌋`.
pub fn lr_at(epoch: usize) -> f64 {
    OptimizerConfig::default().lr_at(epoch)
}

/// Adam over the store's trainable parameters.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    grad_clip: Option<f64>,
    step: i32,
    moments: Vec<(ParamId, Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, cfg: &OptimizerConfig) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, vec![S::zero(); p.value.numel()], vec![S::zero(); p.value.numel()]))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            grad_clip: cfg.grad_clip,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// Applies one update from the accumulated gradients. Parameters without
    /// a gradient still advance their moments with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        let clip_scale = self.grad_clip.map_or(1.0, |limit| {
            let norm = self
                .moments
                .iter()
                .filter_map(|(id, _, _)| store.get(*id).grad.as_ref())
                .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        });
        let (b1, b2) = (s::<S>(self.beta1), s::<S>(self.beta2));
        let one = S::one();
        let c1 = s::<S>(1.0 - self.beta1.powi(self.step));
        let c2 = s::<S>(1.0 - self.beta2.powi(self.step));
        let (lr, eps, clip) = (s::<S>(lr), s::<S>(self.eps), s::<S>(clip_scale));
        for (id, m, v) in &mut self.moments {
            let p = store.get_mut(*id);
            let grad = p.grad.take();
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let gj = grad.as_ref().map_or(S::zero(), |g| g.data()[j] * clip);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                values[j] = values[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One mini-batch: forward in training mode, MAE in normalized units,
/// backward, and an Adam update. Returns the batch loss; a non-finite loss
/// is reported as divergence at epoch 0, batch 0 without updating.
pub fn train_step<S: Scalar>(
    model: &TpllmModel,
    store: &mut ParamStore<S>,
    adam: &mut Adam<S>,
    data: &Dataset,
    adj: &NormalizedAdjacency<S>,
    windows: &[usize],
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    store.zero_grad();
    let (x, y) = data.batch::<S>(windows);
    let mut g = Graph::new(true, dropout_seed);
    let xv = g.input(x);
    let pred = model.forward(&mut g, store, xv, adj)?;
    let loss = g.mae(pred, &y)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            lr,
            loss: value,
        });
    }
    g.backward(loss)?.accumulate_into(&g, store);
    adam.step(store, lr);
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Validation MAE of the untrained model.
    pub initial_val_mae: f64,
    pub best_val_mae: f64,
    /// Epoch whose weights were kept; `None` keeps the initial weights.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    /// Best validation MAE after each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = self.initial_val_mae;
        self.history
            .iter()
            .map(|r| {
                best = best.min(r.val_mae);
                best
            })
            .collect()
    }

    pub fn write_history_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for row in &self.history {
            w.serialize(row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mix(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains on `data.splits.train`, validating each epoch, and leaves the best
/// validation weights in `store`. Batches are reshuffled every epoch from a
/// stream derived from `seed`.
pub fn train<S: Scalar>(
    model: &TpllmModel,
    store: &mut ParamStore<S>,
    data: &Dataset,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainState> {
    opt.validate()?;
    let adj = data.adjacency.cast::<S>();
    let initial_val_mae = evaluate(model, store, data, data.splits.val.clone())?.average().mae;
    let mut state = TrainState {
        initial_val_mae,
        best_val_mae: initial_val_mae,
        best_epoch: None,
        steps: 0,
        history: Vec::new(),
    };
    let mut best = store.snapshot();
    let mut adam = Adam::new(store, opt);
    let mut order: Vec<usize> = data.splits.train.clone().collect();
    let mut shuffle_rng = stream(seed, "train.shuffle");

    for epoch in 0..opt.epochs {
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for (batch, chunk) in order.chunks(opt.batch_size).enumerate() {
            let dropout_seed = mix(seed, adam.steps());
            let loss = train_step(model, store, &mut adam, data, &adj, chunk, lr, dropout_seed).map_err(|e| match e {
                Error::Divergence { lr, loss, .. } => Error::Divergence { epoch, batch, lr, loss },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            weight += chunk.len();
        }
        let val_mae = evaluate(model, store, data, data.splits.val.clone())?.average().mae;
        if !val_mae.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                lr,
                loss: val_mae,
            });
        }
        let train_loss = loss_sum / weight as f64;
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_mae {val_mae:.4} lr {lr}");
        state.history.push(HistoryRow {
            epoch,
            train_loss,
            val_mae,
            lr,
        });
        if val_mae < state.best_val_mae {
            state.best_val_mae = val_mae;
            state.best_epoch = Some(epoch);
            best = store.snapshot();
        }
    }
    state.steps = adam.steps();
    store.restore(&best);
    Ok(state)
}

/// Predictions and targets in original units for window range `range`, each
/// laid out as node-major `N×T'` blocks per window.
pub fn predict_range<S: Scalar>(
    model: &TpllmModel,
    store: &ParamStore<S>,
    data: &Dataset,
    range: Range<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let adj = data.adjacency.cast::<S>();
    let idx: Vec<usize> = range.collect();
    let mut pred = Vec::with_capacity(idx.len() * data.nodes() * data.horizon);
    let mut target = Vec::with_capacity(pred.capacity());
    let windows = data.windows();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<S>(chunk);
        let mut g = Graph::new(false, 0);
        let xv = g.input(x);
        let y = model.forward(&mut g, store, xv, &adj)?;
        pred.extend(g.value(y).data().iter().map(|v| clamp_below(data.norm.invert_value(v.as_f64()), 0.0)));
        for &k in chunk {
            windows.target(k, &mut target);
        }
    }
    Ok((pred, target))
}

/// Metrics on de-normalized predictions over window range `range`.
pub fn evaluate<S: Scalar>(model: &TpllmModel, store: &ParamStore<S>, data: &Dataset, range: Range<usize>) -> Result<MetricsReport> {
    if range.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let (pred, target) = predict_range(model, store, data, range)?;
    MetricsReport::from_predictions(&pred, &target, data.horizon)
}

/// Inference on one normalized `N×T` history; output in original units.
pub fn forecast<S: Scalar>(model: &TpllmModel, store: &ParamStore<S>, data: &Dataset, history: &Tensor<f64>) -> Result<Tensor<f64>> {
    let x = data.norm.apply(history).cast::<S>();
    let y = model.predict(store, &x, &data.adjacency.cast())?;
    Ok(y.cast::<f64>().map(|v| clamp_below(data.norm.invert_value(v), 0.0)))
}
