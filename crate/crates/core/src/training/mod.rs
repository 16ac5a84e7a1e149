//! Optimization: adaptive-moment updates with decoupled weight decay, global
//! gradient clipping, a plateau learning-rate schedule, KL annealing and the
//! epoch loop with early stopping.

mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use log::{EpochRecord, TrainLog};

use crate::corpus::EncodedDialog;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::rng::{derive_seed, rng_for};
use crate::numerics::{Graph, ParamStore};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub kl_anneal_steps: usize,
    pub early_stop_patience: usize,
    /// Fraction of the corpus held out for validation.
    pub valid_fraction: f64,
    /// Stop once teacher-forced next-token accuracy on the training set
    /// reaches this value (checked after each epoch).
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.5,
            patience: 10,
            clip_norm: 3.0,
            weight_decay: 1e-6,
            epochs: 100,
            seed: 30,
            batch_size: 16,
            kl_anneal_steps: 5000,
            early_stop_patience: 20,
            valid_fraction: 0.1,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if self.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.kl_anneal_steps == 0 {
            return Err(Error::Config("batch_size, epochs and kl_anneal_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("valid_fraction must lie in [0, 1), got {}", self.valid_fraction)));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected adaptive-moment update followed by decoupled weight
/// decay `w ← w − lr · weight_decay · w`.
pub fn optimizer_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    if let Some(id) = ids.iter().find(|&&id| params.get(id).grad().is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient", params.name(*id))));
    }
    if state.m.is_empty() {
        state.m = ids.iter().map(|&id| vec![0.0; params.get(id).numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != ids.len() {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, &id) in ids.iter().enumerate() {
        let tensor = params.get_mut(id);
        let grad = tensor.grad().unwrap().to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * *w;
        }
    }
    Ok(())
}

/// Global L2 norm of all parameter gradients.
pub fn gradient_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the factor applied (1 when no clipping happened).
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = gradient_norm(params);
    if norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for id in params.ids().collect::<Vec<_>>() {
        if let Some(g) = params.get_mut(id).grad_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
    factor
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            decay,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss and returns the learning rate to use next.
    /// After `patience` consecutive epochs without an improvement of at least
    /// [`IMPROVEMENT_THRESHOLD`], the rate is multiplied by `decay` and the
    /// counter restarts.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best - IMPROVEMENT_THRESHOLD => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.decay;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a whole validation history.
pub fn plateau_schedule(history: &[f64], lr: f64, decay: f64, patience: usize) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Validation("plateau schedule needs at least one validation loss".into()));
    }
    let mut s = PlateauScheduler::new(lr, decay, patience);
    Ok(history.iter().map(|&l| s.observe(l)).last().unwrap())
}

/// Linear KL warm-up: `min(1, step / anneal_steps)`.
pub fn kl_weight(step: u64, anneal_steps: usize) -> f64 {
    (step as f64 / anneal_steps.max(1) as f64).min(1.0)
}

/// Mean loss over `dialogs` in evaluation mode.
pub fn evaluate_loss(model: &Model, dialogs: &[EncodedDialog], kl_w: f64) -> Result<f64> {
    if dialogs.is_empty() {
        return Err(Error::Validation("no dialogs to evaluate".into()));
    }
    let mut total = 0.0;
    for d in dialogs {
        let mut g = Graph::new(model.params(), false, 0);
        total += model.teacher_loss(&mut g, d, kl_w)?.1.total;
    }
    Ok(total / dialogs.len() as f64)
}

/// Teacher-forced next-token accuracy over `dialogs` in evaluation mode.
pub fn accuracy(model: &Model, dialogs: &[EncodedDialog]) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for d in dialogs {
        let (c, t) = model.next_token_accuracy(d)?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::Validation("no target tokens".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Optimizer and schedule state carried across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub schedule: PlateauScheduler,
    pub step: u64,
}

/// Loss and clipping statistics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub clip_factor: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = PlateauScheduler::new(config.lr, config.lr_decay, config.patience);
        Ok(Trainer {
            config,
            adam: AdamState::default(),
            schedule,
            step: 0,
        })
    }

    pub fn kl_weight(&self) -> f64 {
        kl_weight(self.step, self.config.kl_anneal_steps)
    }

    /// Accumulates mean gradients over `batch`, clips them and applies one update.
    pub fn train_step(&mut self, model: &mut Model, batch: &[EncodedDialog]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let kl_w = self.kl_weight();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
        for (i, dialog) in batch.iter().enumerate() {
            let seed = derive_seed(self.config.seed, &format!("step{}/{i}", self.step));
            let mut g = Graph::new(model.params(), true, seed);
            let (loss, parts) = model.teacher_loss(&mut g, dialog, kl_w)?;
            g.backward(loss)?;
            total += parts.total;
            for (id, grad) in g.param_grads() {
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, x)| *a += scale * x),
                    slot => *slot = Some(grad.iter().map(|x| scale * x).collect()),
                }
            }
        }
        let params = model.params_mut();
        params.zero_grads();
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads[id.0].take().unwrap_or_else(|| vec![0.0; params.get(id).numel()]);
            params.get_mut(id).accumulate_grad(&g)?;
        }
        let clip_factor = clip_gradients(params, self.config.clip_norm);
        optimizer_step(params, &mut self.adam, self.schedule.lr, self.config.weight_decay)?;
        params.zero_grads();
        self.step += 1;
        Ok(StepStats {
            loss: total * scale,
            clip_factor,
        })
    }
}

/// Result of a training run: the log and the best-validation parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_params: ParamStore,
    pub best_epoch: usize,
}

/// Epoch loop with seeded shuffling, clipping, plateau decay and early
/// stopping. On return `model` holds the best-validation parameters.
pub fn train(model: &mut Model, train_set: &[EncodedDialog], valid_set: &[EncodedDialog], config: &TrainConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Validation("training needs non-empty train and validation splits".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = trainer.schedule.lr;
        order.shuffle(&mut rng_for(config.seed, &format!("shuffle/{epoch}")));
        let mut train_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedDialog> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            train_loss += trainer.train_step(model, &batch)?.loss * chunk.len() as f64;
        }
        train_loss /= train_set.len() as f64;
        let kl_w = trainer.kl_weight();
        let valid_loss = evaluate_loss(model, valid_set, kl_w)?;
        trainer.schedule.observe(valid_loss);
        let improved = best.as_ref().is_none_or(|(b, _, _)| valid_loss < b - IMPROVEMENT_THRESHOLD);
        if improved {
            best = Some((valid_loss, model.params().clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        let train_accuracy = match config.target_accuracy {
            Some(_) => Some(accuracy(model, train_set)?),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
            kl_weight: kl_w,
            train_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        if stale >= config.early_stop_patience {
            log.stopped_early = true;
            break;
        }
        if let (Some(target), Some(acc)) = (config.target_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    *model.params_mut() = best_params.clone();
    Ok(TrainOutcome {
        log,
        best_params,
        best_epoch,
    })
}
