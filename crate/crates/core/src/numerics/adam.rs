use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore, ParamTensor, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update from `param.grad`. Frozen tensors are
    /// left untouched and do not advance the step counter.
    pub fn step(&mut self, param: &mut ParamTensor<T>) -> Result<()> {
        if self.m.shape() != param.value.shape() || param.grad.shape() != param.value.shape() {
            return Err(Error::State(format!(
                "moments {:?}, param '{}' {:?}, grad {:?}",
                self.m.shape(),
                param.name,
                param.value.shape(),
                param.grad.shape()
            )));
        }
        if !param.trainable {
            return Ok(());
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let one = T::one();
        let g = param.grad.data();
        let m = self.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = self.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        for ((p, &mi), &vi) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(self.m.data())
            .zip(self.v.data())
        {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| AdamState::new(p.value.rows(), p.value.cols(), config))
            .collect();
        Self { states }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.states.iter_mut().for_each(|s| s.config.lr = lr);
    }

    /// Apply one update to every trainable tensor, then clear all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(Error::State(format!(
                "{} optimizer states for {} parameters",
                self.states.len(),
                store.len()
            )));
        }
        for (state, param) in self.states.iter_mut().zip(store.iter_mut()) {
            state.step(param)?;
        }
        store.zero_grad();
        Ok(())
    }
}
