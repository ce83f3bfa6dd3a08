//! Losses, optimizer, learning-rate schedule and the training loop.

pub mod ablate;
pub mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decoder::LabelSequence;
use crate::error::{Error, Result};
use crate::inference::greedy_decode;
use crate::metrics::{adaptive_acc, fixed_acc, EvalPair};
use crate::model::{image_tensor, Model};
use crate::nn::{Group, ParamStore};
use crate::rng;
use crate::synth::Image;
use crate::tensor::{Tape, Tensor, Var};

pub use ablate::{ablate, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, CheckpointHeader};

/// Mean cross-entropy over the positions whose target is `Some` (PAD
/// positions carry `None`).
pub fn sequence_loss<'t>(logits: Var<'t>, targets: &[Option<usize>]) -> Result<Var<'t>> {
    logits.cross_entropy(targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_transformer: f32,
    pub lr_backbone: f32,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 3,
            lr_transformer: 1e-3,
            lr_backbone: 1e-4,
            decay_epochs: vec![15, 25],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 170 epochs, 20 warm-up, decays at 70 and 120.
    pub fn long_schedule() -> Self {
        Self {
            epochs: 170,
            warmup_epochs: 20,
            decay_epochs: vec![70, 120],
            ..Self::default()
        }
    }

    /// The schedule of the CPU benchmark runs: 20 epochs, one warm-up epoch,
    /// one decay at epoch 13 and a rate of 0.02 for both parameter groups.
    pub fn benchmark() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 1,
            lr_transformer: 0.02,
            lr_backbone: 0.02,
            decay_epochs: vec![13],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warm-up ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr_transformer > 0.0 && self.lr_backbone > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("learning rates and decay factor must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self, group: Group) -> f32 {
        match group {
            Group::Transformer => self.lr_transformer,
            Group::Backbone => self.lr_backbone,
        }
    }
}

/// Learning rate at a (possibly fractional) epoch: linear warm-up from 0,
/// then division by `decay_factor` at each decay epoch passed.
pub fn lr_at(epoch: f64, config: &TrainConfig, group: Group) -> f32 {
    let base = config.base_lr(group) as f64;
    let warm = config.warmup_epochs as f64;
    if epoch < warm {
        return (base * epoch / warm) as f32;
    }
    let decays = config.decay_epochs.iter().filter(|&&d| epoch >= d as f64).count();
    (base / (config.decay_factor as f64).powi(decays as i32)) as f32
}

/// v ← μ·v + g + wd·p; p ← p − lr·v.
pub fn sgd_update(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum(pub Vec<Tensor>);

impl Momentum {
    pub fn zeros(params: &ParamStore) -> Self {
        Self(params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect())
    }
}

/// One SGD-with-momentum step over every parameter. Weight decay is skipped
/// for parameters flagged as non-decaying; parameters without a gradient
/// still see their momentum and decay applied.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut Momentum,
    lr: impl Fn(Group) -> f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if grads.len() != params.len() || state.0.len() != params.len() {
        return Err(Error::dim("sgd_momentum_step", "gradient/state count differs from parameter count"));
    }
    for (id, g) in params.iter().map(|(id, _)| id).zip(grads) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", params.param(id).name)));
            }
        }
    }
    for (((_, param), g), v) in params.iter_mut().zip(grads).zip(state.0.iter_mut()) {
        let wd = if param.decay { weight_decay } else { 0.0 };
        let rate = lr(param.group);
        let zeros;
        let grad = match g {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; param.value.numel()];
                &zeros
            }
        };
        sgd_update(param.value.data_mut(), grad, v.data_mut(), rate, momentum, wd);
    }
    Ok(())
}

/// One training example held in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub image: Image,
    pub labels: LabelSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_fixed_acc: Option<f64>,
    pub val_adaptive_acc: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,split,loss,fixed_acc,adaptive_acc\n");
    for e in log {
        out += &format!("{},train,{:.6},,\n", e.epoch, e.train_loss);
        if let (Some(f), Some(a)) = (e.val_fixed_acc, e.val_adaptive_acc) {
            out += &format!("{},val,,{f:.6},{a:.6}\n", e.epoch);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_adaptive: Option<f64>,
    pub momentum: Momentum,
    /// Set when training stopped on a non-finite loss; the model then holds
    /// the last good weights.
    pub diverged: Option<String>,
}

/// Mean loss of one mini-batch, with gradients for every parameter.
pub fn batch_gradients(model: &Model, batch: &[&Example]) -> Result<(f32, Vec<Option<Tensor>>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let mut total: Option<Var> = None;
    for ex in batch {
        let img = tape.constant(image_tensor(&ex.image));
        let loss = model.loss(&p, img, &ex.labels)?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mean = total.scale(1.0 / batch.len() as f32);
    let value = mean.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    tape.backward(mean)?;
    Ok((value, p.grads()))
}

/// Repeated full-batch SGD steps at a constant learning rate, gradients
/// clipped to joint norm `clip` and no weight decay; returns the loss before each step. A capacity sanity check.
pub fn overfit_batch(model: &mut Model, batch: &[&Example], steps: usize, lr: f32, momentum: f32, clip: f32) -> Result<Vec<f32>> {
    let mut state = Momentum::zeros(&model.params);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, mut grads) = batch_gradients(model, batch)?;
        losses.push(loss);
        clip_grad_norm(&mut grads, clip);
        sgd_momentum_step(&mut model.params, &grads, &mut state, |_| lr, momentum, 0.0)?;
    }
    Ok(losses)
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f32 {
    let norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f32>()).sum::<f32>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Predictions of `model` for every example, paired with the truth.
pub fn evaluate_pairs(model: &Model, examples: &[Example]) -> Result<Vec<EvalPair>> {
    use rayon::prelude::*;
    examples
        .par_iter()
        .map(|ex| Ok(EvalPair::new(greedy_decode(model, &ex.image)?.labels, ex.labels.clone())))
        .collect()
}

/// Trains `model` in place. With a validation set the weights of the epoch
/// with the best validation adaptive accuracy are kept; otherwise the last.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut momentum = Momentum::zeros(&model.params);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut diverged = None;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng::derive(config.seed, 0x7472_6169_6e00 + epoch as u64));
        let mut loss_sum = 0.0f64;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = match batch_gradients(model, &batch) {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    diverged = Some(format!("epoch {epoch}, step {step}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss as f64 * batch.len() as f64;
            let at = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let stepped = sgd_momentum_step(
                &mut model.params,
                &grads,
                &mut momentum,
                |g| lr_at(at, config, g),
                config.momentum,
                config.weight_decay,
            );
            if let Err(Error::Numeric(msg)) = stepped {
                diverged = Some(format!("epoch {epoch}, step {step}: {msg}"));
                break 'epochs;
            }
            stepped?;
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_fixed_acc: None,
            val_adaptive_acc: None,
        };
        if !val_set.is_empty() {
            let pairs = evaluate_pairs(model, val_set)?;
            let adaptive = adaptive_acc(&pairs, model.max_len())?;
            entry.val_fixed_acc = Some(fixed_acc(&pairs, model.max_len())?);
            entry.val_adaptive_acc = Some(adaptive);
            if best.as_ref().map_or(true, |(b, _, _)| adaptive > *b) {
                best = Some((adaptive, epoch, model.params.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (best_val_adaptive, best_epoch) = match best {
        Some((acc, epoch, params)) => {
            model.params = params;
            (Some(acc), epoch)
        }
        None => (None, log.len().saturating_sub(1)),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_adaptive,
        momentum,
        diverged,
    })
}
