//! AdamW with decoupled weight decay, and a warmup + cosine learning-rate schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{round_slice_to_f32, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub shape: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Moments> {
        self.moments.iter().find(|m| m.name == name)
    }

    /// Rounds both moment buffers to 32-bit precision, the checkpoint storage format.
    pub fn round_to_f32(&mut self) {
        for mo in &mut self.moments {
            round_slice_to_f32(&mut mo.m);
            round_slice_to_f32(&mut mo.v);
        }
    }
}

/// One AdamW update of `params` from their accumulated gradients.
///
/// A parameter without a gradient buffer is treated as having a zero gradient.
/// Moment buffers are created on first sight of a name.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    let mut slot: HashMap<String, usize> = state
        .moments
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.clone(), i))
        .collect();
    for (name, t) in params.iter() {
        match slot.get(name) {
            Some(&i) => {
                if state.moments[i].shape != t.shape() {
                    return Err(Error::Contract(format!(
                        "optimizer state for {name} has shape {:?}, parameter has {:?}",
                        state.moments[i].shape,
                        t.shape()
                    )));
                }
            }
            None => {
                slot.insert(name.clone(), state.moments.len());
                state.moments.push(Moments {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (name, p) in params.iter_mut() {
        let mo = &mut state.moments[slot[name.as_str()]];
        let grad = p.grad().map(<[f64]>::to_vec);
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            mo.m[i] = hp.beta1 * mo.m[i] + (1.0 - hp.beta1) * g;
            mo.v[i] = hp.beta2 * mo.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = mo.m[i] / bc1;
            let v_hat = mo.v[i] / bc2;
            data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay to
/// `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, lr_max: f64, lr_min: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_min;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + (lr_max - lr_min) * (1.0 + (PI * progress).cos()) / 2.0
}
