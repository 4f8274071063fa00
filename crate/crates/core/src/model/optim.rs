use serde::{Deserialize, Serialize};

use super::cluster::ClusterProjector;
use super::mlp::{Mlp, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer applied parameter by parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Optimizer {
    /// Updates one parameter from its accumulated gradient and resets the
    /// gradient. Parameters no backward pass reached are left alone.
    pub fn update(&self, p: &mut Param) {
        let Some(grad) = p.grad() else { return };
        let mut values = p.values().to_vec();
        match self.kind {
            OptimizerKind::Sgd => {
                for (v, g) in values.iter_mut().zip(&grad) {
                    *v -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                p.steps += 1;
                let t = p.steps as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for i in 0..values.len() {
                    let g = grad[i];
                    let m = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g;
                    let s = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g * g;
                    p.first_moment[i] = m;
                    p.second_moment[i] = s;
                    values[i] -= self.learning_rate * (m / bc1) / ((s / bc2).sqrt() + self.epsilon);
                }
            }
        }
        p.replace(values);
    }

    /// Steps the shared layer (unless frozen) and head `index`.
    pub fn step_cluster(&self, cp: &mut ClusterProjector, index: usize) {
        for p in cp.active_params_mut(index) {
            self.update(p);
        }
    }

    /// Steps every parameter of an unfrozen network; frozen ones are skipped.
    pub fn step_mlp(&self, net: &mut Mlp) {
        if net.is_frozen() {
            return;
        }
        for p in net.params_mut() {
            self.update(p);
        }
    }
}
