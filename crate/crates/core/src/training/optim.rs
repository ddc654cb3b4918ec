//! Adam with bias correction, global-norm clipping, and the plateau
//! schedule (halve the rate, then stop).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for every parameter tensor, in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// One update. Non-finite gradients abort the step and leave everything untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Model(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for ((name, t), g) in params.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::Model(format!("gradient for {name} has {} entries, expected {}", g.len(), t.numel())));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("gradient of {name} contains {bad}")));
            }
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, ((_, t), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// What the schedule did after one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Plateau schedule. Both counters count epochs without a strictly lower
/// validation loss; the halving counter restarts after each halving, the
/// stopping counter only on improvement.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub best: f64,
    pub epoch: usize,
    pub since_halve: usize,
    pub since_improve: usize,
}

impl Schedule {
    pub fn new(lr: f64, halve_patience: usize, stop_patience: usize, max_epochs: usize) -> Self {
        Self {
            lr,
            halve_patience,
            stop_patience,
            max_epochs,
            best: f64::INFINITY,
            epoch: 0,
            since_halve: 0,
            since_improve: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> ScheduleEvent {
        self.epoch += 1;
        let mut ev = ScheduleEvent::default();
        if val_loss < self.best {
            self.best = val_loss;
            self.since_halve = 0;
            self.since_improve = 0;
            ev.improved = true;
        } else {
            self.since_halve += 1;
            self.since_improve += 1;
            if self.since_halve >= self.halve_patience {
                self.lr /= 2.0;
                self.since_halve = 0;
                ev.halved = true;
            }
        }
        ev.stop = self.since_improve >= self.stop_patience || self.epoch >= self.max_epochs;
        ev
    }
}
