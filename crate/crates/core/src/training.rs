//! Weighted regression objective, input normalization and the optimization loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForecastSample};
use crate::error::{Error, Result};
use crate::hydrology::{FloodThresholds, RETURN_PERIODS};
use crate::model::{Model, ModelInputs, ModelOrders};
use crate::nn::{ParamStore, Tape};
use crate::tensor::Tensor;

pub use crate::hydrology::severity_rank;

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const GRAD_CLIP: f64 = 10.0;

/// `r̂` if it exceeds one year, else 1.
pub fn loss_weight(r: f64) -> f64 {
    if r > 1.0 {
        r
    } else {
        1.0
    }
}

/// `exp(α (L − l + 1))` for 1-based lead `l`.
pub fn leadtime_weight(lead: usize, leads: usize, alpha: f64) -> f64 {
    (alpha * (leads as f64 - lead as f64 + 1.0)).exp()
}

/// `sign(Δ) ln(1 + |Δ|)`, or its inverse `sign(y)(e^|y| − 1)`.
pub fn transform_delta(x: f64, inverse: bool) -> f64 {
    if inverse {
        x.signum() * x.abs().exp_m1()
    } else {
        x.signum() * x.abs().ln_1p()
    }
}

/// Mean of `w (target − pred)²` over all elements.
pub fn weighted_mse(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape() != weights.shape() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "pred {:?}, target {:?}, weights {:?}",
            pred.shape(),
            target.shape(),
            weights.shape()
        )));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((p, t), w)| w * (t - p).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub return_periods: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            return_periods: RETURN_PERIODS.to_vec(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if self.return_periods.iter().any(|r| !RETURN_PERIODS.contains(r)) {
            return Err(Error::Config("return periods must come from the fitted table".into()));
        }
        Ok(())
    }

    /// `û_l · ŵ(r̂)` per element of an untransformed `[L, P]` target.
    pub fn weights(&self, target: &Tensor, thresholds: &FloodThresholds) -> Result<Tensor> {
        let s = target.shape();
        if s.len() != 2 || s[1] != thresholds.points.len() {
            return Err(Error::Shape(format!(
                "target {s:?} against {} threshold rows",
                thresholds.points.len()
            )));
        }
        let (leads, p) = (s[0], s[1]);
        let mut w = Vec::with_capacity(leads * p);
        for l in 0..leads {
            let u = leadtime_weight(l + 1, leads, self.alpha);
            for q in 0..p {
                let x = target.get(&[l, q]);
                let th = &thresholds.points[q].theta;
                let r = RETURN_PERIODS
                    .iter()
                    .zip(th)
                    .filter(|(rp, t)| self.return_periods.contains(rp) && x >= **t)
                    .map(|(rp, _)| *rp)
                    .fold(0.0, f64::max);
                w.push(u * loss_weight(r));
            }
        }
        Tensor::new(vec![leads, p], w)
    }
}

/// Per-variable standardization over the last axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variables with zero spread; these are only centered.
    pub constant: Vec<bool>,
}

impl NormStats {
    /// Statistics of `values` viewed as rows of `vars` columns; `NaN` entries are skipped.
    pub fn compute(values: &[f64], vars: usize) -> Result<Self> {
        if vars == 0 || !values.len().is_multiple_of(vars) {
            return Err(Error::Shape(format!("{} values in rows of {vars}", values.len())));
        }
        let mut n = vec![0.0; vars];
        let mut mean = vec![0.0; vars];
        let mut m2 = vec![0.0; vars];
        for row in values.chunks_exact(vars) {
            for (v, &x) in row.iter().enumerate() {
                if x.is_finite() {
                    n[v] += 1.0;
                    let d = x - mean[v];
                    mean[v] += d / n[v];
                    m2[v] += d * (x - mean[v]);
                }
            }
        }
        let mut std = Vec::with_capacity(vars);
        let mut constant = Vec::with_capacity(vars);
        for v in 0..vars {
            let s = if n[v] > 0.0 { (m2[v] / n[v]).sqrt() } else { 0.0 };
            let flat = !(s > 1e-12 * mean[v].abs().max(1.0));
            constant.push(flat);
            std.push(if flat { 1.0 } else { s });
        }
        Ok(Self { mean, std, constant })
    }

    pub fn vars(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes in place, leaving missing entries missing.
    pub fn apply(&self, values: &mut [f64]) {
        let k = self.vars();
        for (i, x) in values.iter_mut().enumerate() {
            *x = (*x - self.mean[i % k]) / self.std[i % k];
        }
    }

    pub fn denorm(&self, values: &mut [f64]) {
        let k = self.vars();
        for (i, x) in values.iter_mut().enumerate() {
            *x = *x * self.std[i % k] + self.mean[i % k];
        }
    }
}

/// Replaces missing entries with zero, the mean after standardization.
pub fn fill_missing(values: &mut [f64]) {
    for x in values.iter_mut() {
        if !x.is_finite() {
            *x = 0.0;
        }
    }
}

/// Statistics for every input source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub era5: NormStats,
    pub glofas: NormStats,
    pub cpc: NormStats,
    pub hres: NormStats,
    pub static_attrs: NormStats,
}

impl InputNorm {
    /// Uses only days before the last training issuance and the forecasts
    /// issued on training days.
    pub fn compute(data: &Dataset, train: &[usize]) -> Result<Self> {
        let last = *train
            .iter()
            .max()
            .ok_or_else(|| Error::InsufficientRecord("empty training split".into()))?;
        let p = data.n_points();
        let sim = &data.sim;
        let leads = data.spec().lead_times;
        let mut hres = Vec::with_capacity(train.len() * leads * p * crate::data::HRES_VARS);
        for &t in train {
            for l in 1..=leads {
                hres.extend(sim.hres_forecast(t, l));
            }
        }
        Ok(Self {
            era5: NormStats::compute(&sim.era5[..last * p * crate::data::ERA5_VARS], crate::data::ERA5_VARS)?,
            glofas: NormStats::compute(&sim.glofas[..last * p * crate::data::GLOFAS_VARS], crate::data::GLOFAS_VARS)?,
            cpc: NormStats::compute(&sim.cpc[..last * p * crate::data::CPC_VARS], crate::data::CPC_VARS)?,
            hres: NormStats::compute(&hres, crate::data::HRES_VARS)?,
            static_attrs: NormStats::compute(&data.points.static_matrix(), data.points.n_static())?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

fn normalized(t: &Tensor, stats: &NormStats) -> Tensor {
    let mut t = t.clone();
    stats.apply(t.data_mut());
    fill_missing(t.data_mut());
    t
}

/// Turns dataset samples into model inputs and weighted targets.
pub struct Prepared<'a> {
    pub data: &'a Dataset,
    pub norm: InputNorm,
    pub loss: LossConfig,
    pub thresholds: &'a FloodThresholds,
    static_attrs: Tensor,
}

/// A single training or evaluation example.
pub struct Example {
    pub inputs: ModelInputs,
    /// Transformed delta target, `[L, P]`.
    pub target: Tensor,
    pub weights: Tensor,
    pub sample: ForecastSample,
}

impl<'a> Prepared<'a> {
    pub fn new(
        data: &'a Dataset,
        norm: InputNorm,
        loss: LossConfig,
        thresholds: &'a FloodThresholds,
        positional_encoding: bool,
    ) -> Result<Self> {
        loss.validate()?;
        if thresholds.points.len() != data.n_points() {
            return Err(Error::Invalid("thresholds must cover every point".into()));
        }
        for (pt, th) in data.points.points().iter().zip(&thresholds.points) {
            if pt.id != th.point_id {
                return Err(Error::Invalid(format!("thresholds list point {} where {} was expected", th.point_id, pt.id)));
            }
        }
        let p = data.n_points();
        let vs = data.points.n_static();
        let mut raw = data.points.static_matrix();
        norm.static_attrs.apply(&mut raw);
        fill_missing(&mut raw);
        let width = vs + if positional_encoding { 3 } else { 0 };
        let mut st = Vec::with_capacity(p * width);
        for (q, pt) in data.points.points().iter().enumerate() {
            st.extend_from_slice(&raw[q * vs..(q + 1) * vs]);
            if positional_encoding {
                st.extend(crate::geometry::positional_features(pt.lat, pt.lon, pt.elevation));
            }
        }
        Ok(Self {
            data,
            norm,
            loss,
            thresholds,
            static_attrs: Tensor::new(vec![p, width], st)?,
        })
    }

    pub fn inputs(&self, s: &ForecastSample) -> ModelInputs {
        ModelInputs {
            era5: normalized(&s.era5, &self.norm.era5),
            glofas: normalized(&s.glofas, &self.norm.glofas),
            cpc: normalized(&s.cpc, &self.norm.cpc),
            hres: normalized(&s.hres, &self.norm.hres),
            static_attrs: self.static_attrs.clone(),
        }
    }

    pub fn example(&self, day: usize) -> Result<Example> {
        let sample = self.data.sample(day)?;
        let p = sample.x_prev.len();
        let target = sample
            .target
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| transform_delta(x - sample.x_prev[i % p], false))
            .collect();
        Ok(Example {
            inputs: self.inputs(&sample),
            target: Tensor::new(sample.target.shape().to_vec(), target)?,
            weights: self.loss.weights(&sample.target, self.thresholds)?,
            sample,
        })
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    /// Caps the optimizer steps per epoch; `None` visits every training date.
    pub steps_per_epoch: Option<usize>,
    /// Every n-th training date enters the before/after training-loss evaluation.
    pub train_eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: GRAD_CLIP,
            steps_per_epoch: None,
            train_eval_stride: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr.max(self.min_lr) {
            return Err(Error::Config("epochs must be positive and learning rates non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.train_eval_stride == 0 {
            return Err(Error::Config("train_eval_stride must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("grad_clip must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup then cosine annealing from `base` down to `min`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay; moments live in the parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (w, g, m, v, no_decay) = store.optimizer_view(id);
            let decay = if no_decay { 0.0 } else { self.weight_decay };
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                w[i] -= lr * (update + decay * w[i]);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max: f64) -> f64 {
    let n = store.grad_norm();
    if n > max {
        store.scale_grads(max / n);
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub trace: Vec<TraceRow>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Evaluation-mode loss over a fixed subset of training dates before and after fitting.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

impl FitReport {
    /// `(epoch, step, lr, train_loss, val_loss)`, empty `val_loss` when there is no validation split.
    pub fn write_trace<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "step", "lr", "train_loss", "val_loss"])?;
        for r in &self.trace {
            out.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn example_loss(model: &Model, ex: &Example, orders: &ModelOrders) -> Result<f64> {
    let y = model.predict(&ex.inputs, orders)?;
    weighted_mse(&y, &ex.target, &ex.weights)
}

/// Mean evaluation-mode loss over `days`.
pub fn evaluate_loss(model: &Model, prep: &Prepared, days: &[usize], orders: &ModelOrders) -> Result<f64> {
    if days.is_empty() {
        return Err(Error::InsufficientRecord("no dates to evaluate".into()));
    }
    let mut total = 0.0;
    for &d in days {
        total += example_loss(model, &prep.example(d)?, orders)?;
    }
    Ok(total / days.len() as f64)
}

/// One optimizer step on one issuance date; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    ex: &Example,
    orders: &ModelOrders,
    lr: f64,
    grad_clip: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::training(dropout_seed);
    let out = model.forward(&mut tape, &ex.inputs, orders)?;
    let loss = tape.weighted_mse(out.delta, ex.target.data(), ex.weights.data())?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    grads.accumulate(&mut model.store);
    clip_grad_norm(&mut model.store, grad_clip);
    opt.step(&mut model.store, lr);
    Ok(value)
}

/// Trains on one date per step and keeps the parameters with the lowest
/// validation loss (the last epoch when `val` is empty).
pub fn fit(
    model: &mut Model,
    prep: &Prepared,
    train: &[usize],
    val: &[usize],
    orders: &ModelOrders,
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&TraceRow),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientRecord("empty training split".into()));
    }
    let per_epoch = cfg.steps_per_epoch.unwrap_or(train.len()).min(train.len()).max(1);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg);

    let train_eval: Vec<usize> = train.iter().step_by(cfg.train_eval_stride).copied().collect();
    let initial_train_loss = evaluate_loss(model, prep, &train_eval, orders)?;
    let initial_val = if val.is_empty() {
        None
    } else {
        Some(evaluate_loss(model, prep, val, orders)?)
    };
    let mut trace = vec![TraceRow {
        epoch: 0,
        step: 0,
        lr: 0.0,
        train_loss: initial_train_loss,
        val_loss: initial_val,
    }];
    progress(&trace[0]);
    let mut best: Option<(f64, usize, ParamStore)> = initial_val.map(|v| (v, 0, model.store.clone()));

    let mut order: Vec<usize> = train.to_vec();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for &day in order.iter().take(per_epoch) {
            lr = cosine_lr(step, total, warmup, cfg.lr, cfg.min_lr);
            let ex = prep.example(day)?;
            let dropout_seed = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let loss = train_step(model, &mut opt, &ex, orders, lr, cfg.grad_clip, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sum += loss;
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, prep, val, orders)?)
        };
        let row = TraceRow {
            epoch,
            step,
            lr,
            train_loss: sum / per_epoch as f64,
            val_loss,
        };
        progress(&row);
        trace.push(row);
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store.clone()));
            }
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((v, e, store)) => {
            model.store.copy_values_from(&store)?;
            (e, Some(v))
        }
        None => (cfg.epochs, None),
    };
    let final_train_loss = evaluate_loss(model, prep, &train_eval, orders)?;
    Ok(FitReport {
        trace,
        best_epoch,
        best_val_loss,
        initial_train_loss,
        final_train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SampleSpec};
    use crate::model::ModelConfig;
    use crate::nn::Tape;
    use rand::Rng;

    #[test]
    fn loss_and_lead_weights() {
        assert_eq!(loss_weight(0.0), 1.0);
        assert_eq!(loss_weight(10.0), 10.0);
        assert_eq!(loss_weight(1.5), 1.5);
        for r in RETURN_PERIODS {
            assert_eq!(loss_weight(r), r);
        }
        assert!((leadtime_weight(7, 7, 0.25) - 0.25f64.exp()).abs() < 1e-12);
        assert!((1..=7).all(|l| leadtime_weight(l, 7, 0.0) == 1.0));
        assert!((1..7).all(|l| leadtime_weight(l, 7, 0.25) > leadtime_weight(l + 1, 7, 0.25)));
    }

    #[test]
    fn severity_boundaries() {
        let theta = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0];
        assert_eq!(severity_rank(0.5, &theta), 0.0);
        assert_eq!(severity_rank(25.0, &theta), 20.0);
        assert_eq!(severity_rank(5.0, &theta), 5.0);
    }

    #[test]
    fn delta_transform() {
        assert_eq!(transform_delta(0.0, false), 0.0);
        let e = std::f64::consts::E;
        assert!((transform_delta(e - 1.0, false) - 1.0).abs() < 1e-15);
        assert!((transform_delta(1.0, true) - (e - 1.0)).abs() < 1e-15);
        assert!((transform_delta(-(e * e - 1.0), false) + 2.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let x: f64 = rng.random_range(-1e6..1e6);
            let back = transform_delta(transform_delta(x, false), true);
            assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
            let y: f64 = rng.random_range(-13.8..13.8);
            assert!((transform_delta(transform_delta(y, true), false) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_mse_oracles() {
        let t = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        assert_eq!(weighted_mse(&t(vec![1.0, 2.0]), &t(vec![1.0, 2.0]), &t(vec![3.0, 4.0])).unwrap(), 0.0);
        assert_eq!(weighted_mse(&t(vec![1.0]), &t(vec![3.0]), &t(vec![1.0])).unwrap(), 4.0);
        assert!(weighted_mse(&t(vec![1.0]), &t(vec![1.0, 2.0]), &t(vec![1.0])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, l, p) = (2, 3, 5);
        let shape = [b, l, p];
        let pred = Tensor::randn(&shape, 1.0, &mut rng);
        let target = Tensor::randn(&shape, 1.0, &mut rng);
        let w = Tensor::uniform(&shape, 1.0, 20.0, &mut rng);
        let mut oracle = 0.0;
        for i in 0..b {
            for j in 0..l {
                for k in 0..p {
                    let idx = [i, j, k];
                    oracle += w.get(&idx) * (target.get(&idx) - pred.get(&idx)).powi(2);
                }
            }
        }
        oracle /= (b * l * p) as f64;
        assert!((weighted_mse(&pred, &target, &w).unwrap() - oracle).abs() < 1e-12);

        // permuting points jointly leaves the loss unchanged
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng);
        let permute = |x: &Tensor| {
            let mut y = x.clone();
            for i in 0..b {
                for j in 0..l {
                    for (k, &src) in perm.iter().enumerate() {
                        y.set(&[i, j, k], x.get(&[i, j, src]));
                    }
                }
            }
            y
        };
        let permuted = weighted_mse(&permute(&pred), &permute(&target), &permute(&w)).unwrap();
        assert!((permuted - oracle).abs() < 1e-12);

        // tape gradient against −2w(y − ŷ)/(BLP)
        let mut tape = Tape::new();
        let x = tape.leaf(pred.clone());
        let loss = tape.weighted_mse(x, target.data(), w.data()).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        for i in 0..pred.len() {
            let closed = -2.0 * w.data()[i] * (target.data()[i] - pred.data()[i]) / pred.len() as f64;
            assert!((gx[i] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_follow_severity() {
        let th = FloodThresholds {
            points: vec![crate::hydrology::PointThresholds::from_fit(1, crate::hydrology::GumbelFit { mu: 10.0, beta: 2.0 }, 5).unwrap()],
        };
        let theta = th.points[0].theta;
        let cfg = LossConfig::default();
        let target = Tensor::new(vec![2, 1], vec![theta[2] + 1e-9, 0.0]).unwrap();
        let w = cfg.weights(&target, &th).unwrap();
        assert!((w.get(&[0, 0]) - 5.0 * 0.5f64.exp()).abs() < 1e-12);
        assert!((w.get(&[1, 0]) - 0.25f64.exp()).abs() < 1e-12);
        // monotone in severity at fixed lead
        let mut last = 0.0;
        for &t in &theta {
            let w = cfg.weights(&Tensor::new(vec![1, 1], vec![t]).unwrap(), &th).unwrap().get(&[0, 0]);
            assert!(w >= last);
            last = w;
        }
    }

    #[test]
    fn norm_stats_behaviour() {
        let vals = vec![1.0, 5.0, 3.0, 5.0, f64::NAN, 5.0, 2.0, 5.0];
        let s = NormStats::compute(&vals, 2).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.constant, vec![false, true]);
        let mut x = vec![2.0, 5.0, f64::NAN, 7.0];
        s.apply(&mut x);
        fill_missing(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..300).map(|_| rng.random_range(-50.0..80.0)).collect();
        let st = NormStats::compute(&raw, 3).unwrap();
        let mut y = raw.clone();
        st.apply(&mut y);
        st.denorm(&mut y);
        for (a, b) in raw.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_and_optimizer_basics() {
        assert!(cosine_lr(0, 100, 10, 1e-3, 0.0) < cosine_lr(9, 100, 10, 1e-3, 0.0));
        assert_eq!(cosine_lr(9, 100, 10, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(100, 100, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-15);
        assert_eq!(cosine_lr(5, 10, 0, 2.0, 0.0), 1.0);

        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::full(&[3], 1.0)).unwrap();
        store.accumulate_grad(id, &[30.0, 40.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut store, 10.0), 50.0);
        assert!((store.grad_norm() - 10.0).abs() < 1e-12);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&TrainConfig::default());
        opt.step(&mut store, 0.0);
        assert_eq!(store.value(id), &before);
        opt.step(&mut store, 0.1);
        assert!(store.value(id).data()[0] < 1.0);
    }

    fn tiny() -> (Dataset, FloodThresholds, ModelConfig) {
        let spec = SampleSpec {
            hindcast_steps: 2,
            lead_times: 2,
            ..SampleSpec::default()
        };
        let data = generate_dataset(4, 12, 420, spec).unwrap();
        let ids: Vec<u64> = data.points.points().iter().map(|p| p.id).collect();
        let th = FloodThresholds {
            points: ids
                .iter()
                .map(|&id| crate::hydrology::PointThresholds::from_fit(id, crate::hydrology::GumbelFit { mu: 5.0, beta: 2.0 }, 5).unwrap())
                .collect(),
        };
        let cfg = ModelConfig {
            hindcast_steps: 2,
            lead_times: 2,
            hidden: 8,
            hres_hidden: 4,
            hindcast_depths: vec![1, 1],
            d_state: 2,
            head_hidden: 8,
            era5_embed: 4,
            glofas_embed: 2,
            cpc_embed: 2,
            ..ModelConfig::default()
        };
        (data, th, cfg)
    }

    #[test]
    fn overfits_one_batch() {
        let (data, th, cfg) = tiny();
        let train = [30usize];
        let norm = InputNorm::compute(&data, &data.issuance_days()[..300]).unwrap();
        let prep = Prepared::new(&data, norm, LossConfig::default(), &th, cfg.positional_encoding).unwrap();
        let mut model = Model::new(cfg.clone(), 3).unwrap();
        let orders = ModelOrders::build(&data.points, &cfg).unwrap();
        let ex = prep.example(train[0]).unwrap();
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&tc);
        let first = example_loss(&model, &ex, &orders).unwrap();
        for s in 0..200 {
            train_step(&mut model, &mut opt, &ex, &orders, 1e-2, GRAD_CLIP, s).unwrap();
        }
        let last = example_loss(&model, &ex, &orders).unwrap();
        assert!(last <= 0.05 * first, "{first} -> {last}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (data, th, cfg) = tiny();
        let days = data.issuance_days();
        let norm = InputNorm::compute(&data, &days[..100]).unwrap();
        let prep = Prepared::new(&data, norm, LossConfig::default(), &th, true).unwrap();
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        let before = model.store.clone();
        let orders = ModelOrders::build(&data.points, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            lr: 0.0,
            min_lr: 0.0,
            steps_per_epoch: Some(5),
            ..TrainConfig::default()
        };
        let rep = fit(&mut model, &prep, &days[..20], &[], &orders, &tc, 0, |_| {}).unwrap();
        assert_eq!(rep.trace.len(), 2);
        for id in model.store.ids() {
            assert_eq!(model.store.value(id), before.value(id));
        }
        let mut csv = Vec::new();
        rep.write_trace(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,step,lr,train_loss,val_loss\n"));
    }

    #[test]
    fn fit_is_deterministic_and_keeps_best() {
        let (data, th, cfg) = tiny();
        let days = data.issuance_days();
        let norm = InputNorm::compute(&data, &days[..100]).unwrap();
        let prep = Prepared::new(&data, norm, LossConfig::default(), &th, true).unwrap();
        let orders = ModelOrders::build(&data.points, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr: 3e-3,
            steps_per_epoch: Some(10),
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(cfg.clone(), 8).unwrap();
            let r = fit(&mut m, &prep, &days[..100], &days[150..160], &orders, &tc, 7, |_| {}).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.store.write(&mut x).unwrap();
        b.store.write(&mut y).unwrap();
        assert_eq!(x, y);
        let best = ra.trace.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(ra.best_val_loss, Some(best));
        let reeval = evaluate_loss(&a, &prep, &days[150..160], &orders).unwrap();
        assert!((reeval - best).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (data, th, cfg) = tiny();
        let days = data.issuance_days();
        let norm = InputNorm::compute(&data, &days[..100]).unwrap();
        let prep = Prepared::new(&data, norm, LossConfig::default(), &th, true).unwrap();
        let orders = ModelOrders::build(&data.points, &cfg).unwrap();
        let mut model = Model::new(cfg.clone(), 2).unwrap();
        let ex = prep.example(days[0]).unwrap();
        let first = example_loss(&model, &ex, &orders).unwrap();
        assert!(first.is_finite());
        let id = model.store.ids().next().unwrap();
        let n = model.store.value(id).len();
        model.store.set_value(id, &vec![f64::NAN; n]).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            steps_per_epoch: Some(2),
            ..TrainConfig::default()
        };
        let err = fit(&mut model, &prep, &days[..5], &[], &orders, &tc, 0, |_| {});
        assert!(err.is_err());
    }
}
