use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSizes, Optimizer};

/// How test-time assignment compares clusters across task heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Argmax over the concatenated raw logits of every head.
    #[default]
    RawLogits,
    /// Softmax inside each head, then argmax over the concatenation.
    HeadSoftmax,
}

/// Components switched off (or swapped) for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Train without prototype repulsion.
    pub no_prototypes: bool,
    /// Drop the student-to-teacher distillation term.
    pub no_kd: bool,
    /// Distill from a frozen copy of the previous teacher instead of the
    /// student pool.
    pub single_frozen_teacher: bool,
}

impl Ablation {
    pub const DEFAULT: Ablation = Ablation {
        no_prototypes: false,
        no_kd: false,
        single_frozen_teacher: false,
    };
    pub const NO_PROTOTYPES: Ablation = Ablation {
        no_prototypes: true,
        ..Ablation::DEFAULT
    };
    pub const NO_KD: Ablation = Ablation {
        no_kd: true,
        ..Ablation::DEFAULT
    };
    pub const SINGLE_FROZEN_TEACHER: Ablation = Ablation {
        single_frozen_teacher: true,
        ..Ablation::DEFAULT
    };

    /// The four configurations compared in an ablation sweep.
    pub const SWEEP: [Ablation; 4] = [
        Ablation::DEFAULT,
        Ablation::NO_PROTOTYPES,
        Ablation::NO_KD,
        Ablation::SINGLE_FROZEN_TEACHER,
    ];

    /// Row name used in reports, e.g. `"FBCC w/o KD"`.
    pub fn label(&self) -> String {
        let mut label = String::from("FBCC");
        if self.no_prototypes {
            label.push_str(" w/o Pro");
        }
        if self.no_kd {
            label.push_str(" w/o KD");
        }
        if self.single_frozen_teacher {
            label.push_str(" + CaSSLe");
        }
        label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Student pool capacity `M`; `None` picks `max(2, ⌈N/2⌉)`.
    pub students: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub temperature: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub sizes: ModelSizes,
    pub augmentation: AugmentationConfig,
    pub assign_mode: AssignMode,
    /// Weight of the size term in the distillation score.
    pub alpha: f64,
    /// Fail a step whose frozen networks received gradient.
    pub audit_grads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            students: None,
            epochs: 50,
            batch_size: 128,
            optimizer: Optimizer::default(),
            temperature: 1.0,
            seed: 0,
            ablation: Ablation::default(),
            sizes: ModelSizes::default(),
            augmentation: AugmentationConfig::default(),
            assign_mode: AssignMode::default(),
            alpha: 0.5,
            audit_grads: true,
        }
    }
}

impl TrainConfig {
    /// Pool capacity for a stream of `tasks` tasks.
    pub fn pool_capacity(&self, tasks: usize) -> usize {
        self.students.unwrap_or_else(|| tasks.div_ceil(2).max(2))
    }

    /// Checks the configuration against a stream of `n` tasks.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("the stream has no tasks".into()));
        }
        let m = self.pool_capacity(n);
        if m < 2 || m > n.max(2) {
            return Err(Error::Config(format!("student pool size {m} must lie in [2, {}]", n.max(2))));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.ablation.no_kd && self.ablation.single_frozen_teacher {
            return Err(Error::Config(
                "no_kd and single_frozen_teacher cannot be combined".into(),
            ));
        }
        self.augmentation.validate()?;
        self.sizes.validate()?;
        if !self.sizes.pool_fits_budget(m) {
            log::warn!(
                "{m} students x {} parameters reach the teacher's {} parameters",
                self.sizes.param_count_student(),
                self.sizes.param_count_teacher()
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_ablation_flags() {
        let labels: Vec<String> = Ablation::SWEEP.iter().map(Ablation::label).collect();
        assert_eq!(labels, ["FBCC", "FBCC w/o Pro", "FBCC w/o KD", "FBCC + CaSSLe"]);
    }

    #[test]
    fn default_pool_is_half_the_tasks() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.pool_capacity(5), 3);
        assert_eq!(cfg.pool_capacity(10), 5);
        assert_eq!(cfg.pool_capacity(1), 2);
        cfg.validate(5).unwrap();
        cfg.validate(1).unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate(5)
        };
        assert!(with(&|c| c.students = Some(1)).is_err());
        assert!(with(&|c| c.students = Some(6)).is_err());
        assert!(with(&|c| c.batch_size = 1).is_err());
        assert!(with(&|c| c.temperature = 0.0).is_err());
        assert!(with(&|c| {
            c.ablation.no_kd = true;
            c.ablation.single_frozen_teacher = true;
        })
        .is_err());
        assert!(TrainConfig::default().validate(0).is_err());
    }

    #[test]
    fn json_fills_defaults_and_rejects_unknown_keys() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "ablation": {"no_kd": true}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.ablation.no_kd);
        assert_eq!(cfg.batch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
