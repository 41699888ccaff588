//! SGD and Adam with L2 decay, plus the validation-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const DEFAULT_WEIGHT_DECAY: f64 = 0.001;
pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_PLATEAU_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 coefficient added to the gradient as `lambda * w`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimState {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Applies one update to every parameter tensor in place.
pub fn optimizer_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if !(state.lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be > 0, got {}",
            state.lr
        )));
    }
    state.step += 1;
    let lr = state.lr;
    let lambda = state.weight_decay;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    let wv = *w as f64;
                    *w = (wv - lr * (gv as f64 + lambda * wv)) as f32;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
            }
            let (b1, b2) = (state.beta1, state.beta2);
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let wv = *w as f64;
                    let gr = gv as f64 + lambda * wv;
                    let mj = b1 * m[j] as f64 + (1.0 - b1) * gr;
                    let vj = b2 * v[j] as f64 + (1.0 - b2) * gr * gr;
                    m[j] = mj as f32;
                    v[j] = vj as f32;
                    let mhat = mj / c1;
                    let vhat = vj / c2;
                    *w = (wv - lr * mhat / (vhat.sqrt() + state.eps)) as f32;
                }
            }
        }
    }
    Ok(())
}

/// Reduce-on-plateau: after `patience` consecutive epochs without a new best
/// validation error, the learning rate is multiplied by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState::new(DEFAULT_PATIENCE, DEFAULT_PLATEAU_FACTOR)
    }
}

impl PlateauState {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauState {
            best: f64::INFINITY,
            bad_epochs: 0,
            patience: patience.max(1),
            factor,
        }
    }

    /// Records one epoch's validation error and returns the learning rate to use next.
    pub fn update(&mut self, val_error: f64, lr: f64) -> f64 {
        if val_error < self.best {
            self.best = val_error;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
