//! Mini-batch training and top-1 evaluation.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::optim::{adamw_step, cosine_lr, AdamWParams, OptimizerState};
use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::init::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Fraction of all optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = AdamWParams::default();
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_frac: 0.05,
            weight_decay: hp.weight_decay,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Number of rows whose argmax matches the label; ties go to the lowest index.
pub fn top1_correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    let model_side = (cfg.in_channels, cfg.image_size, cfg.image_size, cfg.classes);
    let data_side = (data.channels, data.height, data.width, data.classes);
    if model_side != data_side {
        return Err(Error::Contract(format!(
            "model expects (C,H,W,classes) = {model_side:?}, dataset has {data_side:?}"
        )));
    }
    Ok(())
}

/// Stepwise trainer; the optimizer step counter doubles as the position in
/// the epoch/batch schedule, so a restored state resumes mid-run.
pub struct Trainer<'a> {
    model: &'a mut Model,
    data: &'a Dataset,
    cfg: TrainConfig,
    state: OptimizerState,
    history: History,
    perm: Option<(usize, Vec<usize>)>,
    epoch_acc: (f64, usize, usize),
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, data: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        Self::resume(model, data, cfg, OptimizerState::new())
    }

    pub fn resume(
        model: &'a mut Model,
        data: &'a Dataset,
        cfg: TrainConfig,
        state: OptimizerState,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        check_compatible(model, data)?;
        Ok(Trainer {
            model,
            data,
            cfg,
            state,
            history: History::default(),
            perm: None,
            epoch_acc: (0.0, 0, 0),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.cfg.warmup_frac * self.total_steps() as f64).round() as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            let seed = derive_seed(self.cfg.seed, &format!("shuffle/{epoch}"));
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            self.perm = Some((epoch, idx));
        }
        &self.perm.as_ref().unwrap().1
    }

    /// Runs the next optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Contract("training schedule already complete".into()));
        }
        let s = self.state.step;
        let spe = self.steps_per_epoch();
        let epoch = (s / spe) as usize;
        let b = (s % spe) as usize;
        let bs = self.cfg.batch_size;
        let n = self.data.len();
        let idx = self.permutation(epoch)[b * bs..((b + 1) * bs).min(n)].to_vec();
        let images = self.data.images(&idx);
        let labels = self.data.batch_labels(&idx);

        let mut tape = Tape::new();
        let x = tape.constant(&images);
        let logits = self.model.forward(&mut tape, x)?;
        let correct = top1_correct(tape.value(logits), self.model.config().classes, &labels);
        let loss_var = tape.cross_entropy(logits, &labels)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss {loss} at step {s}"
            )));
        }
        let grads = tape.backward(loss_var)?;

        self.model.zero_grad();
        self.model.apply_gradients(&grads)?;
        let lr = cosine_lr(
            s + 1,
            self.total_steps(),
            self.warmup_steps(),
            self.cfg.lr_max,
            self.cfg.lr_min,
        );
        let hp = self.cfg.adamw();
        let mut params = self.model.trainable_params_mut();
        adamw_step(&mut params, &mut self.state, lr, &hp)?;
        for (_, p) in params.iter_mut() {
            p.round_to_f32();
        }
        self.state.round_to_f32();

        let rec = StepRecord {
            step: s + 1,
            epoch,
            lr,
            loss,
            correct,
            count: idx.len(),
        };
        self.epoch_acc.0 += loss * idx.len() as f64;
        self.epoch_acc.1 += correct;
        self.epoch_acc.2 += idx.len();
        if b as u64 + 1 == spe {
            let (sum, hit, cnt) = std::mem::replace(&mut self.epoch_acc, (0.0, 0, 0));
            self.history.epochs.push(EpochRecord {
                epoch,
                loss: sum / cnt as f64,
                accuracy: hit as f64 / cnt as f64,
            });
        }
        self.history.steps.push(rec.clone());
        Ok(rec)
    }

    /// Steps until the optimizer counter reaches `step` (capped at the schedule end).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.state.step < step.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<(History, OptimizerState)> {
        self.run_until(u64::MAX)?;
        Ok((self.history, self.state))
    }
}

/// Trains `model` for the full schedule and returns its metrics history.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    Ok(Trainer::new(model, data, cfg.clone())?.run()?.0)
}

/// Top-1 accuracy over `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    check_compatible(model, data)?;
    let classes = model.config().classes;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let logits = model.logits(&data.images(chunk))?;
        correct += top1_correct(logits.data(), classes, &data.batch_labels(chunk));
    }
    Ok(correct as f64 / data.len() as f64)
}
