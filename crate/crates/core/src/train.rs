//! MSE training with RMSprop, early stopping, and test-split metrics.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;

use crate::dataset::{ChannelNorm, NormalizationSpec, Splits, StateWindow, WindowSource};
use crate::error::{Error, Result};
use crate::model::{window_loss, GraphContext, ModelParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Mean of squared differences over all elements.
pub fn mse_loss<'t, S: Scalar>(pred: Var<'t, S>, target: Var<'t, S>) -> Result<Var<'t, S>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", &pred.shape(), &target.shape()));
    }
    let d = pred.sub(target)?;
    d.mul(d)?.mean()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub early_stop_patience: usize,
    /// Offset between consecutive training windows.
    pub train_stride: usize,
    /// Offset between consecutive validation windows.
    pub val_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 40,
            epochs: 200,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            early_stop_patience: 20,
            train_stride: 1,
            val_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr must be > 0, batch_size and epochs ≥ 1".into()));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::Config("weight decay is not supported".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config("rmsprop_alpha must be in [0,1) and rmsprop_eps > 0".into()));
        }
        if self.train_stride == 0 || self.val_stride == 0 {
            return Err(Error::Config("strides must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Running squared-gradient averages, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<S> {
    pub lr: S,
    pub alpha: S,
    pub eps: S,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(params: &ModelParams<S>, lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr: S::lit(lr),
            alpha: S::lit(alpha),
            eps: S::lit(eps),
            v: params.flat().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← α·v + (1−α)·g²`, `p ← p − lr·g/(√v + eps)`.
    ///
    /// `grads` follows the parameter visiting order. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != self.v.len() {
            return Err(Error::dim("rmsprop_step", &[grads.len()], &[self.v.len()]));
        }
        for (g, v) in grads.iter().zip(&self.v) {
            if g.shape() != v.shape() {
                return Err(Error::dim("rmsprop_step", g.shape(), v.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        let (lr, a, eps) = (self.lr, self.alpha, self.eps);
        let mut k = 0;
        let v_all = &mut self.v;
        params.for_each_mut(|_, p| {
            let g = grads[k].data();
            let v = v_all[k].data_mut();
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = a * *v + (S::one() - a) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            }
            k += 1;
        });
        Ok(())
    }
}

/// Loss and per-tensor gradients for one window, in visiting order.
pub fn window_gradients<S: Scalar>(params: &ModelParams<S>, ctx: &GraphContext, w: &StateWindow) -> Result<(S, Vec<Tensor<S>>)> {
    let tape = Tape::new();
    let vars = params.bind(&tape, true)?;
    let loss = window_loss(&vars, ctx, w)?;
    let value = loss.value().data()[0];
    tape.backward(loss)?;
    let mut grads = Vec::new();
    vars.try_map(|_, v| {
        grads.push(tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())));
        Ok(())
    })?;
    Ok((value, grads))
}

/// Running sum of per-window gradients, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer<S> {
    pub sums: Vec<Tensor<S>>,
    pub count: usize,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        Self {
            sums: params.flat().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            count: 0,
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.sums {
            t.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
        self.count = 0;
    }

    pub fn accumulate(&mut self, grads: &[Tensor<S>]) {
        for (a, g) in self.sums.iter_mut().zip(grads) {
            for (a, &g) in a.data_mut().iter_mut().zip(g.data()) {
                *a += g;
            }
        }
        self.count += 1;
    }

    /// Per-window average of everything accumulated since the last reset.
    pub fn mean(&self) -> Vec<Tensor<S>> {
        let inv = S::one() / S::lit(self.count.max(1) as f64);
        self.sums
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
                t
            })
            .collect()
    }
}

/// Mean loss and mean gradient over a batch, reduced in window order.
pub fn batch_gradients<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &GraphContext,
    batch: &[StateWindow],
    buf: &mut GradBuffer<S>,
) -> Result<(S, Vec<Tensor<S>>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    buf.zero_grads();
    let mut loss = S::zero();
    for w in batch {
        let (l, g) = window_gradients(params, ctx, w)?;
        loss += l;
        buf.accumulate(&g);
    }
    Ok((loss / S::lit(batch.len() as f64), buf.mean()))
}

/// Mean window MSE over a source (normalized units).
pub fn mean_loss<S: Scalar>(params: &ModelParams<S>, ctx: &GraphContext, src: &WindowSource, stride: usize) -> Result<f64> {
    let (q, t) = (params.hyper.q, params.hyper.horizon);
    let offsets = src.offsets(q, t, stride);
    if offsets.is_empty() {
        return Err(Error::InsufficientData("no windows to score".into()));
    }
    let mut sum = 0.0;
    for &i in &offsets {
        let tape = Tape::new();
        let vars = params.bind(&tape, false)?;
        let l = window_loss(&vars, ctx, &src.window(i, q, t))?;
        let v = l.value().data()[0].as_f64();
        sum += v;
    }
    Ok(sum / offsets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters from the epoch with the lowest validation MSE.
    pub params: ModelParams<S>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

fn failure(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::Numeric(_) => Error::TrainingFailure {
            epoch,
            msg: e.to_string(),
        },
        other => other,
    }
}

/// Mini-batch RMSprop on shuffled training windows with early stopping on
/// validation MSE. `on_epoch` sees every finished epoch.
pub fn train<S: Scalar>(
    init: ModelParams<S>,
    ctx: &GraphContext,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let (q, t) = (init.hyper.q, init.hyper.horizon);
    let mut order = splits.train.offsets(q, t, cfg.train_stride);
    if order.is_empty() || splits.val.count(q, t, cfg.val_stride) == 0 {
        return Err(Error::InsufficientData("train and validation splits need at least one window".into()));
    }
    let mut shuffle = rng::named(cfg.seed, "shuffle");
    let mut opt = RmsProp::new(&init, cfg.lr, cfg.rmsprop_alpha, cfg.rmsprop_eps);
    let mut buf = GradBuffer::new(&init);
    let mut params = init.clone();
    let mut best = (init, f64::INFINITY, 0usize);
    let mut curve = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<StateWindow> = chunk.iter().map(|&i| splits.train.window(i, q, t)).collect();
            let (loss, grads) = batch_gradients(&params, ctx, &batch, &mut buf).map_err(|e| failure(epoch, e))?;
            total += loss.as_f64() * chunk.len() as f64;
            opt.step(&mut params, &grads).map_err(|e| failure(epoch, e))?;
        }
        let val_mse = mean_loss(&params, ctx, &splits.val, cfg.val_stride).map_err(|e| failure(epoch, e))?;
        if !val_mse.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                msg: "validation loss is not finite".into(),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_mse: total / order.len() as f64,
            val_mse,
        };
        on_epoch(&rec);
        curve.push(rec);
        if val_mse < best.1 {
            best = (params.clone(), val_mse, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        curve,
        best_epoch: best.2,
        best_val_mse: best.1,
    })
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let rows = curve
        .iter()
        .map(|r| format!("{},{:?},{:?}", r.epoch, r.train_mse, r.val_mse));
    crate::csvio::write(path, "epoch,train_mse,val_mse", rows)
}

/// Normalized predictions for every window of a source.
#[derive(Clone, Debug)]
pub struct Forecasts {
    /// Absolute index of each window's first history step.
    pub t0: Vec<usize>,
    pub q: usize,
    /// `[T, N, P]` per window.
    pub pred: Vec<Array3<f64>>,
    pub truth: Vec<Array3<f64>>,
}

impl Forecasts {
    pub fn len(&self) -> usize {
        self.t0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t0.is_empty()
    }

    /// Absolute time of horizon step `h` in window `w`.
    pub fn time_of(&self, w: usize, h: usize) -> usize {
        self.t0[w] + self.q + h
    }
}

/// Runs the model over a source; `edit` may alter each window first (e.g.
/// to blank feature channels).
pub fn forecast<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &GraphContext,
    src: &WindowSource,
    stride: usize,
    mut edit: impl FnMut(&mut StateWindow),
) -> Result<Forecasts> {
    let (q, t) = (params.hyper.q, params.hyper.horizon);
    let offsets = src.offsets(q, t, stride);
    if offsets.is_empty() {
        return Err(Error::InsufficientData("no windows to forecast".into()));
    }
    let mut out = Forecasts {
        t0: Vec::with_capacity(offsets.len()),
        q,
        pred: Vec::with_capacity(offsets.len()),
        truth: Vec::with_capacity(offsets.len()),
    };
    for i in offsets {
        let mut w = src.window(i, q, t);
        edit(&mut w);
        out.pred.push(params.predict(ctx, &w)?);
        out.t0.push(w.t0);
        out.truth.push(w.y);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Metrics {
    pub mae_mph: f64,
    pub rmse_norm: f64,
    pub rmse_mph: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    pub n_windows: usize,
}

#[derive(Default)]
struct Acc {
    abs_mph: f64,
    sq_norm: f64,
    sq_mph: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, pred: f64, truth: f64, speed: &ChannelNorm) {
        let d = pred - truth;
        let dm = speed.denormalize(pred) - speed.denormalize(truth);
        self.abs_mph += dm.abs();
        self.sq_norm += d * d;
        self.sq_mph += dm * dm;
        self.n += 1;
    }

    fn metrics(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        Metrics {
            mae_mph: self.abs_mph / n,
            rmse_norm: (self.sq_norm / n).sqrt(),
            rmse_mph: (self.sq_mph / n).sqrt(),
        }
    }
}

/// Error metrics over all windows, nodes, horizons and channels. Both
/// prediction and truth are mapped back to mph with the training-split
/// statistics.
pub fn report(f: &Forecasts, norm: &NormalizationSpec) -> Result<EvalReport> {
    if f.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let speed = &norm.state[0];
    let horizon = f.pred[0].dim().0;
    let mut all = Acc::default();
    let mut per: Vec<Acc> = (0..horizon).map(|_| Acc::default()).collect();
    for (p, y) in f.pred.iter().zip(&f.truth) {
        for ((h, n, c), &pv) in p.indexed_iter() {
            let yv = y[[h, n, c]];
            all.push(pv, yv, speed);
            per[h].push(pv, yv, speed);
        }
    }
    Ok(EvalReport {
        overall: all.metrics(),
        per_horizon: per.iter().map(Acc::metrics).collect(),
        n_windows: f.len(),
    })
}

/// Forecast the source and report metrics.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &GraphContext,
    src: &WindowSource,
    norm: &NormalizationSpec,
    stride: usize,
) -> Result<EvalReport> {
    report(&forecast(params, ctx, src, stride, |_| {})?, norm)
}

impl EvalReport {
    /// `(metric, scope, value)` rows; scope is `all` or `h<k>` (1-based).
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        let mut add = |scope: String, m: &Metrics| {
            rows.push(("mae_mph".to_string(), scope.clone(), m.mae_mph));
            rows.push(("rmse_norm".to_string(), scope.clone(), m.rmse_norm));
            rows.push(("rmse_mph".to_string(), scope, m.rmse_mph));
        };
        add("all".into(), &self.overall);
        for (h, m) in self.per_horizon.iter().enumerate() {
            add(format!("h{}", h + 1), m);
        }
        rows.push(("n_windows".into(), "all".into(), self.n_windows as f64));
        rows
    }
}

/// Writes `metric,scope,value` rows with round-trip float formatting.
pub fn write_metrics(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    crate::csvio::write(
        path,
        "metric,scope,value",
        rows.iter().map(|(m, s, v)| format!("{m},{s},{v:?}")),
    )
}

/// Human-readable one-line summary.
pub fn summary_line(label: &str, r: &EvalReport, mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(
        w,
        "{label:<12} mae_mph={:.4} rmse_norm={:.4} rmse_mph={:.4} windows={}",
        r.overall.mae_mph, r.overall.rmse_norm, r.overall.rmse_mph, r.n_windows
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert_eq!(mse_loss(a, b).unwrap().value().data(), &[1.0]);
        assert_eq!(mse_loss(a, a).unwrap().value().data(), &[0.0]);
        let c = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(mse_loss(a, c), Err(Error::Dimension { .. })));
    }
}
