//! Parameterized networks: the teacher and student encoders, instance
//! projectors, predictors, and the multi-head cluster projector.

mod cluster;
mod mlp;
mod optim;

use serde::{Deserialize, Serialize};

pub use cluster::ClusterProjector;
pub use mlp::{Activation, Dense, Mlp, Param};
pub use optim::{Optimizer, OptimizerKind};

use crate::error::{Error, Result};

/// Layer widths for every network in the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub input_dim: usize,
    /// Hidden widths of the teacher encoder.
    pub teacher_hidden: Vec<usize>,
    /// Hidden widths of each student encoder.
    pub student_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub projector_hidden: usize,
    pub proj_dim: usize,
    pub predictor_hidden: usize,
    pub cluster_hidden: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes {
            input_dim: 16,
            teacher_hidden: vec![128],
            student_hidden: vec![24],
            latent_dim: 64,
            projector_hidden: 64,
            proj_dim: 32,
            predictor_hidden: 32,
            cluster_hidden: 64,
        }
    }
}

impl ModelSizes {
    fn chain(&self, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(hidden);
        dims.push(self.latent_dim);
        dims
    }

    pub fn teacher_dims(&self) -> Vec<usize> {
        self.chain(&self.teacher_hidden)
    }

    pub fn student_dims(&self) -> Vec<usize> {
        self.chain(&self.student_hidden)
    }

    pub fn projector_dims(&self) -> Vec<usize> {
        vec![self.latent_dim, self.projector_hidden, self.proj_dim]
    }

    pub fn predictor_dims(&self) -> Vec<usize> {
        vec![self.proj_dim, self.predictor_hidden, self.proj_dim]
    }

    /// #Param_T: weights and biases of the teacher encoder.
    pub fn param_count_teacher(&self) -> usize {
        dense_count(&self.teacher_dims())
    }

    /// #Param_S: weights and biases of one student encoder.
    pub fn param_count_student(&self) -> usize {
        dense_count(&self.student_dims())
    }

    /// Rejects zero widths and students at least as large as the teacher.
    pub fn validate(&self) -> Result<()> {
        let all = [self.teacher_dims(), self.student_dims(), self.projector_dims(), self.predictor_dims()];
        if all.iter().flatten().any(|&d| d == 0) || self.cluster_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.param_count_student() >= self.param_count_teacher() {
            return Err(Error::Config(format!(
                "student ({}) must have fewer parameters than the teacher ({})",
                self.param_count_student(),
                self.param_count_teacher()
            )));
        }
        Ok(())
    }

    /// Whether `students` students together stay below the teacher's size.
    pub fn pool_fits_budget(&self, students: usize) -> bool {
        students * self.param_count_student() < self.param_count_teacher()
    }
}

fn dense_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_student_is_much_lighter() {
        let s = ModelSizes::default();
        s.validate().unwrap();
        assert_eq!(s.param_count_teacher(), 16 * 128 + 128 + 128 * 64 + 64);
        assert_eq!(s.param_count_student(), 16 * 24 + 24 + 24 * 64 + 64);
        assert!(s.pool_fits_budget(3));
        assert!(s.pool_fits_budget(5));
        assert!(!s.pool_fits_budget(10));
    }

    #[test]
    fn oversized_student_is_rejected() {
        let s = ModelSizes {
            student_hidden: vec![256],
            ..ModelSizes::default()
        };
        assert!(s.validate().is_err());
    }
}
