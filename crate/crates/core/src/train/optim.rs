//! SGD with momentum and the reduce-on-plateau learning-rate scheduler.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grad::Tensor;

use super::TrainError;

/// v ← momentum·v + g;  p ← p − lr·v.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocities: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocities: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
    ) -> Result<(), TrainError> {
        if grad.shape() != param.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(TrainError::Config(format!(
                "velocity shape {:?} does not match parameter {name} {:?}",
                v.shape(),
                param.shape()
            )));
        }
        let lr = self.lr;
        let m = self.momentum;
        for ((p, vel), g) in param
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
        {
            *vel = m * *vel + g;
            *p -= lr * *vel;
        }
        Ok(())
    }

    pub fn velocities(&self) -> &BTreeMap<String, Tensor> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: String, v: Tensor) {
        self.velocities.insert(name, v);
    }
}

/// Scheduler state, serialized into checkpoint metadata.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PlateauState {
    pub best_metric: Option<f64>,
    pub bad_count: u32,
}

/// Halve the learning rate (down to a floor) after `patience` validations
/// without a strict improvement of at least `eps_improve`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub patience: u32,
    pub factor: f64,
    pub min_lr: f64,
    pub eps_improve: f64,
    pub state: PlateauState,
}

pub struct PlateauDecision {
    pub lr: f64,
    pub reduced: bool,
    /// The plateau persisted with the learning rate already at the floor.
    pub exhausted: bool,
}

impl PlateauScheduler {
    pub fn new(patience: u32, factor: f64, min_lr: f64, eps_improve: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            min_lr,
            eps_improve,
            state: PlateauState::default(),
        }
    }

    pub fn observe(&mut self, metric: f64, current_lr: f64) -> PlateauDecision {
        let improved = match self.state.best_metric {
            None => true,
            Some(best) => metric < best - self.eps_improve,
        };
        if improved {
            self.state.best_metric = Some(metric);
            self.state.bad_count = 0;
            return PlateauDecision {
                lr: current_lr,
                reduced: false,
                exhausted: false,
            };
        }
        self.state.bad_count += 1;
        if self.state.bad_count > self.patience {
            self.state.bad_count = 0;
            if current_lr <= self.min_lr {
                return PlateauDecision {
                    lr: self.min_lr,
                    reduced: false,
                    exhausted: true,
                };
            }
            let lr = (current_lr * self.factor).max(self.min_lr);
            return PlateauDecision {
                lr,
                reduced: true,
                exhausted: false,
            };
        }
        PlateauDecision {
            lr: current_lr,
            reduced: false,
            exhausted: false,
        }
    }
}
