//! Pretraining of the prior denoiser and fine-tuning of steering adapters.
//!
//! Loss convention everywhere: squared error summed over coordinates,
//! averaged over the batch.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::DenoiserModel;
use crate::conditions::Condition;
use crate::datasets::LabeledDataset;
use crate::diffusion::{forward_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::steering::SteeringModule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepSampling {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub t_sampling: TimestepSampling,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            grad_accum: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            seed: 0,
            t_sampling: TimestepSampling::Uniform,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: 2.5K epochs, otherwise as [`Default`].
    pub fn finetune_default() -> Self {
        Self { epochs: 2500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Adam with optional decoupled weight decay (AdamW).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decoupled: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            decoupled: cfg.optimizer == OptimizerKind::AdamW,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let mut g = grads[i];
            if !self.decoupled {
                g += self.weight_decay * params[i];
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            if self.decoupled {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * update;
        }
    }
}

/// `mean_i ‖pred_i − η_i‖²`.
pub fn denoising_loss(eps_pred: ArrayView2<f64>, eta: ArrayView2<f64>) -> Result<f64> {
    if eps_pred.dim() != eta.dim() {
        return Err(Error::shape(format!("{:?}", eta.dim()), format!("{:?}", eps_pred.dim())));
    }
    let n = eta.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let diff = &eps_pred - &eta;
    Ok(diff.mapv(|d| d * d).sum() / n as f64)
}

/// `∂loss/∂pred` for [`denoising_loss`], scaled by `weight`.
fn loss_grad(eps_pred: &Array2<f64>, eta: ArrayView2<f64>, weight: f64) -> Array2<f64> {
    let n = eta.nrows() as f64;
    (eps_pred - &eta) * (2.0 * weight / n)
}

/// Per-class flattened conditions, looked up by label.
fn condition_table(classes: usize, condition_fn: &dyn Fn(usize) -> Result<Condition>) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = (0..classes).map(|k| condition_fn(k).map(|c| c.flatten())).collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Parameter("condition_fn returned conditions of differing sizes".into()));
    }
    Ok(Array2::from_shape_vec((classes, dim), rows.concat()).expect("rows are uniform"))
}

/// One optimizer step's worth of data.
pub struct MicroBatch<'a> {
    pub z0: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub ts: &'a [usize],
    pub eta: ArrayView2<'a, f64>,
}

/// Something whose parameters a training loop can update.
pub trait Trainable {
    fn param_count(&self) -> usize;

    /// Adds `weight · ∂loss/∂θ` for `batch` into `grads` and returns the loss.
    fn accumulate(&self, batch: &MicroBatch<'_>, sched: &NoiseSchedule, weight: f64, grads: &mut [f64]) -> Result<f64>;

    fn params_mut(&mut self) -> Result<&mut [f64]>;
}

/// Backbone being trained, optionally with a condition concatenated onto
/// its input.
pub struct PretrainTarget<'m> {
    pub model: &'m mut DenoiserModel,
    conditions: Option<Array2<f64>>,
}

impl Trainable for PretrainTarget<'_> {
    fn param_count(&self) -> usize {
        self.model.params().len()
    }

    fn accumulate(&self, b: &MicroBatch<'_>, sched: &NoiseSchedule, weight: f64, grads: &mut [f64]) -> Result<f64> {
        let zt = forward_batch(b.z0, b.ts, b.eta, sched)?;
        let cond = self.conditions.as_ref().map(|c| c.select(Axis(0), b.labels));
        let trace = self.model.forward_trace(zt.view(), b.ts, cond.as_ref().map(|c| c.view()), &[])?;
        let loss = denoising_loss(trace.output.view(), b.eta)?;
        let d = loss_grad(&trace.output, b.eta, weight);
        self.model.backward(&trace, d.view(), Some(grads))?;
        Ok(loss)
    }

    fn params_mut(&mut self) -> Result<&mut [f64]> {
        Ok(self.model.params_mut()?.data_mut())
    }
}

/// Steering module trained on top of a frozen backbone.
pub struct FinetuneTarget<'m> {
    pub backbone: &'m DenoiserModel,
    pub module: &'m mut SteeringModule,
    conditions: Array2<f64>,
}

impl Trainable for FinetuneTarget<'_> {
    fn param_count(&self) -> usize {
        self.module.params().len()
    }

    fn accumulate(&self, b: &MicroBatch<'_>, sched: &NoiseSchedule, weight: f64, grads: &mut [f64]) -> Result<f64> {
        let zt = forward_batch(b.z0, b.ts, b.eta, sched)?;
        let cond = self.conditions.select(Axis(0), b.labels);
        let (trace, strace) = self.module.forward_trace(self.backbone, zt.view(), b.ts, cond.view())?;
        let loss = denoising_loss(trace.output.view(), b.eta)?;
        let d = loss_grad(&trace.output, b.eta, weight);
        self.module.backward(self.backbone, &trace, &strace, d.view(), grads)?;
        Ok(loss)
    }

    fn params_mut(&mut self) -> Result<&mut [f64]> {
        Ok(self.module.params_mut().data_mut())
    }
}

/// Generic epoch loop. `hook(epoch, target)` runs after every completed
/// epoch (1-based). Returns the mean loss of each epoch.
pub fn train_loop<T: Trainable>(
    target: &mut T,
    data: &LabeledDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(usize, &T) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Parameter("cannot train on an empty dataset".into()));
    }
    let n = data.len();
    let dim = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(target.param_count(), cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let chunk = cfg.batch_size * cfg.grad_accum;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(chunk) {
            global_step += 1;
            let z0 = data.points.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut ts = Vec::with_capacity(idx.len());
            let mut eta = Array2::zeros((idx.len(), dim));
            for i in 0..idx.len() {
                ts.push(rng.random_range(1..=sched.len()));
                for j in 0..dim {
                    eta[[i, j]] = rng.sample(StandardNormal);
                }
            }
            let mut grads = vec![0.0; target.param_count()];
            let mut step_loss = 0.0;
            for start in (0..idx.len()).step_by(cfg.batch_size) {
                let end = (start + cfg.batch_size).min(idx.len());
                let weight = (end - start) as f64 / idx.len() as f64;
                let batch = MicroBatch {
                    z0: z0.slice(ndarray::s![start..end, ..]),
                    labels: &labels[start..end],
                    ts: &ts[start..end],
                    eta: eta.slice(ndarray::s![start..end, ..]),
                };
                step_loss += weight * target.accumulate(&batch, sched, weight, &mut grads)?;
            }
            if !step_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical { location: format!("training loss at step {global_step} (epoch {epoch})") });
            }
            opt.step(target.params_mut()?, &grads);
            epoch_loss += step_loss * idx.len() as f64;
        }
        history.push(epoch_loss / n as f64);
        hook(epoch, target)?;
    }
    Ok(history)
}

/// Trains the unconditional prior denoiser; labels are ignored.
pub fn pretrain(data: &LabeledDataset, model: &mut DenoiserModel, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<Vec<f64>> {
    pretrain_with_hook(data, model, sched, cfg, None, &mut |_, _| Ok(()))
}

/// Pretraining with an optional per-label condition fed to a backbone built
/// with `condition_dim > 0` (used for the from-scratch comparison arm).
pub fn pretrain_with_hook(
    data: &LabeledDataset,
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    condition_fn: Option<&dyn Fn(usize) -> Result<Condition>>,
    hook: &mut dyn FnMut(usize, &PretrainTarget<'_>) -> Result<()>,
) -> Result<Vec<f64>> {
    if model.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen model".into()));
    }
    let conditions = condition_fn.map(|f| condition_table(data.classes, f)).transpose()?;
    let mut target = PretrainTarget { model, conditions };
    train_loop(&mut target, data, sched, cfg, hook)
}

/// Trains `module` against the frozen `backbone` on labeled data, each point
/// conditioned on `condition_fn(label)`.
pub fn finetune(
    backbone: &DenoiserModel,
    module: &mut SteeringModule,
    labeled: &LabeledDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    condition_fn: &dyn Fn(usize) -> Result<Condition>,
) -> Result<Vec<f64>> {
    finetune_with_hook(backbone, module, labeled, sched, cfg, condition_fn, &mut |_, _| Ok(()))
}

pub fn finetune_with_hook(
    backbone: &DenoiserModel,
    module: &mut SteeringModule,
    labeled: &LabeledDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    condition_fn: &dyn Fn(usize) -> Result<Condition>,
    hook: &mut dyn FnMut(usize, &FinetuneTarget<'_>) -> Result<()>,
) -> Result<Vec<f64>> {
    if !backbone.is_frozen() {
        return Err(Error::Config("fine-tuning requires a frozen backbone".into()));
    }
    let conditions = condition_table(labeled.classes, condition_fn)?;
    if conditions.ncols() != module.condition_dim() {
        return Err(Error::Config(format!(
            "conditions have {} entries but the module expects {}",
            conditions.ncols(),
            module.condition_dim()
        )));
    }
    let mut target = FinetuneTarget { backbone, module, conditions };
    train_loop(&mut target, labeled, sched, cfg, hook)
}

/// Mean denoising loss of `predict` over `data`, with fresh `(t, η)` draws.
pub fn evaluate_loss<F>(data: &LabeledDataset, sched: &NoiseSchedule, seed: u64, predict: F) -> Result<f64>
where
    F: Fn(ArrayView2<f64>, &[usize], &[usize]) -> Result<Array2<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.len())).collect();
    let eta = Array2::from_shape_simple_fn((n, data.dim()), || rng.sample::<f64, _>(StandardNormal));
    let zt = forward_batch(data.points.view(), &ts, eta.view(), sched)?;
    let pred = predict(zt.view(), &ts, &data.labels)?;
    denoising_loss(pred.view(), eta.view())
}

/// Appends `run_id,epoch,loss` rows, writing the header for a new file.
pub fn append_loss_history(path: &Path, run_id: &str, history: &[f64]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str("run_id,epoch,loss\n");
    }
    for (i, l) in history.iter().enumerate() {
        buf.push_str(&format!("{run_id},{},{l:e}\n", i + 1));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}
