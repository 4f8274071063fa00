use serde::{Deserialize, Serialize};

use super::config::{AssignMode, TrainConfig};
use super::state::ModelState;
use super::Engine;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    acc_hat, average_acc, average_forgetting, clustering_accuracy, distillation_score, AccMatrix,
    DistillationRecord, DistillationScore,
};

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub forward: f64,
    pub con: f64,
    pub dis: f64,
    pub clu: f64,
    pub backward: f64,
}

impl EpochLoss {
    pub(crate) fn scaled(self, k: f64) -> Self {
        EpochLoss {
            forward: self.forward * k,
            con: self.con * k,
            dis: self.dis * k,
            clu: self.clu * k,
            backward: self.backward * k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCurve {
    pub task_id: usize,
    pub epochs: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc_matrix: AccMatrix,
    pub average_acc: f64,
    /// Absent for single-task streams.
    pub average_forgetting: Option<f64>,
    pub distillation: DistillationRecord,
    pub acc_hat: f64,
    pub distillation_score: DistillationScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCensus {
    pub per_task: Vec<usize>,
    pub skipped: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub teacher: usize,
    pub student: usize,
    /// Students kept at the end of the stream.
    pub stored_students: usize,
    /// Total parameters of the stored students.
    pub pool_total: usize,
    /// Whether the full pool stays below the teacher's size.
    pub pool_fits_budget: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub ablation: String,
    pub config: TrainConfig,
    pub clusters_per_task: Vec<usize>,
    pub students: usize,
    pub head_sizes: Vec<usize>,
    /// `(task_id, local cluster)` of every global cluster id.
    pub cluster_map: Vec<(usize, usize)>,
    pub loss_curves: Vec<TaskCurve>,
    pub evaluation: Evaluation,
    pub prototypes: PrototypeCensus,
    pub params: ParamCounts,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Result of a full run: the report plus the model state after each task.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: Report,
    pub checkpoints: Vec<ModelState>,
}

/// Scores the states saved after each task. `states[t]` must be the state
/// at the end of task `t + 1`.
pub fn evaluate_states(states: &[ModelState], ds: &Dataset, mode: AssignMode, alpha: f64) -> Result<Evaluation> {
    let n = ds.num_tasks();
    if states.len() != n {
        return Err(Error::contract(format!(
            "{} checkpoints for a {n}-task dataset",
            states.len()
        )));
    }
    let mut matrix = AccMatrix::new(n);
    let mut teacher_acc = Vec::with_capacity(n);
    let mut student_acc = Vec::with_capacity(n);
    for (t, state) in states.iter().enumerate() {
        if state.task != t + 1 || state.cluster.num_heads() != t + 1 {
            return Err(Error::contract(format!(
                "checkpoint {} holds task {} with {} heads",
                t + 1,
                state.task,
                state.cluster.num_heads()
            )));
        }
        if state.teacher.input_dim() != ds.input_dim {
            return Err(Error::contract(format!(
                "checkpoint expects {} features, dataset has {}",
                state.teacher.input_dim(),
                ds.input_dim
            )));
        }
        for (i, task) in ds.tasks.iter().enumerate().take(t + 1) {
            let pred = state.assign_clusters(&task.samples, mode)?;
            matrix.set(i, t, clustering_accuracy(&pred, ds.truth.task(i)?)?)?;
        }
        let (ta, sa) = state.distillation_accuracy(&ds.tasks[t].samples, ds.truth.task(t)?)?;
        teacher_acc.push(ta);
        student_acc.push(sa);
    }
    let last = &states[n - 1];
    let record = DistillationRecord {
        teacher_acc,
        student_acc,
        param_count_student: last.pool.current().map_or(0, |s| s.param_count()),
        param_count_teacher: last.teacher.param_count(),
        alpha,
    };
    Ok(Evaluation {
        average_acc: average_acc(&matrix)?,
        average_forgetting: if n >= 2 { Some(average_forgetting(&matrix)?) } else { None },
        acc_hat: acc_hat(&record)?,
        distillation_score: distillation_score(&record)?,
        distillation: record,
        acc_matrix: matrix,
    })
}

/// Trains on every task of `ds` in order and evaluates after each one.
pub fn run_stream(config: &TrainConfig, ds: &Dataset) -> Result<RunOutput> {
    if config.sizes.input_dim != ds.input_dim {
        return Err(Error::Config(format!(
            "model expects {} features, dataset has {}",
            config.sizes.input_dim, ds.input_dim
        )));
    }
    let mut engine = Engine::new(config.clone(), ds.num_tasks())?;
    let mut curves = Vec::with_capacity(ds.num_tasks());
    let mut skipped = Vec::with_capacity(ds.num_tasks());
    let mut checkpoints = Vec::with_capacity(ds.num_tasks());
    for task in &ds.tasks {
        let t = engine.task() + 1;
        if task.task_id != t {
            return Err(Error::contract(format!("expected task {t}, dataset has task {}", task.task_id)));
        }
        engine.begin_task(t, task.num_clusters)?;
        let mut epochs = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let loss = engine.train_epoch(task, epoch)?;
            log::debug!("task {t} epoch {epoch}: forward {:.4} backward {:.4}", loss.forward, loss.backward);
            epochs.push(loss);
        }
        curves.push(TaskCurve { task_id: t, epochs });
        skipped.push(engine.finish_task(task)?);
        checkpoints.push(engine.state().clone());
        log::info!("finished task {t} of {}", ds.num_tasks());
    }

    let evaluation = evaluate_states(&checkpoints, ds, config.assign_mode, config.alpha)?;
    let state = engine.state();
    let prototypes = &state.prototypes;
    let capacity = state.pool.capacity();
    let report = Report {
        ablation: config.ablation.label(),
        config: config.clone(),
        clusters_per_task: ds.clusters_per_task(),
        students: capacity,
        head_sizes: state.cluster.head_sizes(),
        cluster_map: state.cluster_map(),
        loss_curves: curves,
        evaluation,
        prototypes: PrototypeCensus {
            per_task: (1..=ds.num_tasks()).map(|t| prototypes.count_for_task(t)).collect(),
            skipped,
            total: prototypes.len(),
        },
        params: ParamCounts {
            teacher: config.sizes.param_count_teacher(),
            student: config.sizes.param_count_student(),
            stored_students: state.pool.len(),
            pool_total: state.pool.param_count(),
            pool_fits_budget: config.sizes.pool_fits_budget(capacity),
        },
    };
    Ok(RunOutput { report, checkpoints })
}
