use serde::{Deserialize, Serialize};

use super::config::AssignMode;
use crate::error::{Error, Result};
use crate::metrics::clustering_accuracy;
use crate::model::{ClusterProjector, Mlp};
use crate::tensor::{argmax, Matrix};

/// Number of students alive while training task `t`: `t` below the
/// capacity, `m` from then on.
pub fn student_count(t: usize, m: usize) -> usize {
    if t < m {
        t
    } else {
        m
    }
}

/// A finished student and the projector it shared with the teacher.
#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub task_id: usize,
    pub student: Mlp,
    pub projector: Mlp,
}

/// Frozen students of the most recent tasks plus the student being trained.
/// The trainable student's projector is the teacher's live projector, so it
/// is not stored here until the task ends.
#[derive(Clone, Debug)]
pub struct StudentPool {
    capacity: usize,
    frozen: Vec<PoolEntry>,
    current: Option<(usize, Mlp)>,
}

impl StudentPool {
    pub fn new(capacity: usize) -> Self {
        StudentPool {
            capacity,
            frozen: Vec::new(),
            current: None,
        }
    }

    pub(crate) fn from_parts(capacity: usize, frozen: Vec<PoolEntry>, current: Option<(usize, Mlp)>) -> Result<Self> {
        let len = frozen.len() + usize::from(current.is_some());
        if len > capacity {
            return Err(Error::Format(format!("pool of {len} students exceeds capacity {capacity}")));
        }
        Ok(StudentPool { capacity, frozen, current })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frozen.len() + usize::from(self.current.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Task ids of all entries, oldest first.
    pub fn task_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.frozen.iter().map(|e| e.task_id).collect();
        ids.extend(self.current.as_ref().map(|(id, _)| *id));
        ids
    }

    pub fn frozen(&self) -> &[PoolEntry] {
        &self.frozen
    }

    pub fn current(&self) -> Option<&Mlp> {
        self.current.as_ref().map(|(_, s)| s)
    }

    pub fn current_task(&self) -> Option<usize> {
        self.current.as_ref().map(|(id, _)| *id)
    }

    pub(crate) fn current_mut(&mut self) -> Option<&mut Mlp> {
        self.current.as_mut().map(|(_, s)| s)
    }

    /// Freezes the current student together with a copy of `projector`,
    /// evicts the oldest entries beyond capacity, and installs `student` as
    /// the new trainable entry.
    pub(crate) fn rotate(&mut self, projector: &Mlp, student: Mlp, task_id: usize) {
        if let Some((id, mut old)) = self.current.take() {
            old.set_frozen(true);
            let mut proj = projector.clone();
            proj.set_frozen(true);
            self.frozen.push(PoolEntry {
                task_id: id,
                student: old,
                projector: proj,
            });
        }
        let keep = self.capacity - 1;
        if self.frozen.len() > keep {
            self.frozen.drain(..self.frozen.len() - keep);
        }
        self.current = Some((task_id, student));
    }

    pub fn max_abs_grad(&self) -> f64 {
        let frozen = self
            .frozen
            .iter()
            .map(|e| e.student.max_abs_grad().max(e.projector.max_abs_grad()))
            .fold(0.0, f64::max);
        frozen.max(self.current().map_or(0.0, Mlp::max_abs_grad))
    }

    pub fn param_count(&self) -> usize {
        self.frozen
            .iter()
            .map(|e| e.student.param_count())
            .chain(self.current().map(Mlp::param_count))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub task_id: usize,
    /// Local cluster index within its task.
    pub cluster: usize,
    pub vector: Vec<f64>,
}

/// Detached cluster representatives of finished tasks, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeSet {
    items: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Prototype] {
        &self.items
    }

    pub(crate) fn push(&mut self, p: Prototype) {
        self.items.push(p);
    }

    pub fn count_for_task(&self, task_id: usize) -> usize {
        self.items.iter().filter(|p| p.task_id == task_id).count()
    }

    /// One prototype per row, or `None` when the set is empty.
    pub fn matrix(&self) -> Result<Option<Matrix>> {
        let Some(first) = self.items.first() else { return Ok(None) };
        let dim = first.vector.len();
        let data: Vec<f64> = self.items.iter().flat_map(|p| p.vector.iter().copied()).collect();
        Matrix::new(self.items.len(), dim, data).map(Some)
    }
}

/// Running sums for cluster means over samples whose two views land in the
/// same cluster.
#[derive(Clone, Debug)]
pub struct PrototypeAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl PrototypeAccumulator {
    pub fn new(clusters: usize, dim: usize) -> Self {
        PrototypeAccumulator {
            sums: vec![vec![0.0; dim]; clusters],
            counts: vec![0; clusters],
        }
    }

    /// Adds the rows of `za`, `zb` whose assignments `ca[i] == cb[i]`.
    pub fn add(&mut self, za: &Matrix, zb: &Matrix, ca: &[usize], cb: &[usize]) -> Result<()> {
        if za.shape() != zb.shape() || ca.len() != za.rows() || cb.len() != za.rows() {
            return Err(Error::contract("prototype batch views disagree in shape"));
        }
        for i in 0..za.rows() {
            if ca[i] != cb[i] {
                continue;
            }
            let v = ca[i];
            let sum = self
                .sums
                .get_mut(v)
                .ok_or_else(|| Error::contract(format!("cluster {v} out of range")))?;
            for ((s, a), b) in sum.iter_mut().zip(za.row(i)).zip(zb.row(i)) {
                *s += a + b;
            }
            self.counts[v] += 1;
        }
        Ok(())
    }

    /// Mean of both views over reliable samples, `None` for clusters that
    /// never had one.
    pub fn finish(self) -> Vec<Option<Vec<f64>>> {
        self.sums
            .into_iter()
            .zip(self.counts)
            .map(|(sum, n)| (n > 0).then(|| sum.into_iter().map(|s| s / (2 * n) as f64).collect()))
            .collect()
    }
}

/// Concatenates per-head scores and takes the row-wise argmax (ties go to
/// the lowest global id).
pub fn assign_from_logits(head_logits: &[Matrix], mode: AssignMode) -> Result<Vec<usize>> {
    let Some(first) = head_logits.first() else {
        return Err(Error::contract("no trained heads to assign clusters with"));
    };
    let rows = first.rows();
    if head_logits.iter().any(|m| m.rows() != rows) {
        return Err(Error::contract("head logits disagree in row count"));
    }
    let width: usize = head_logits.iter().map(Matrix::cols).sum();
    let mut row = Vec::with_capacity(width);
    let mut ids = Vec::with_capacity(rows);
    for r in 0..rows {
        row.clear();
        for m in head_logits {
            let logits = m.row(r);
            match mode {
                AssignMode::RawLogits => row.extend_from_slice(logits),
                AssignMode::HeadSoftmax => {
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    row.extend(exps.into_iter().map(|e| e / total));
                }
            }
        }
        ids.push(argmax(&row));
    }
    Ok(ids)
}

/// `(task_id, local cluster)` for every global cluster id, in id order.
pub fn global_cluster_map(head_sizes: &[usize]) -> Vec<(usize, usize)> {
    head_sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &size)| (0..size).map(move |v| (t + 1, v)))
        .collect()
}

/// Every network the continual learner keeps between tasks.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub seed: u64,
    /// Last task begun (1-based), 0 before the first.
    pub task: usize,
    pub teacher: Mlp,
    /// Instance projector shared by the teacher and the current student.
    pub projector: Mlp,
    pub cluster: ClusterProjector,
    pub pool: StudentPool,
    pub prototypes: PrototypeSet,
    /// Frozen copy of the previous teacher and its projector, used as the
    /// only distillation source in the single-frozen-teacher ablation.
    pub previous_teacher: Option<PoolEntry>,
}

impl ModelState {
    /// Global cluster ids for raw samples, from the teacher and every
    /// stored head.
    pub fn assign_clusters(&self, x: &Matrix, mode: AssignMode) -> Result<Vec<usize>> {
        if self.cluster.num_heads() == 0 {
            return Err(Error::contract("no trained heads to assign clusters with"));
        }
        let hidden = self.cluster.infer_hidden(&self.teacher.infer(x)?)?;
        let logits = (0..self.cluster.num_heads())
            .map(|k| self.cluster.infer_head_logits(&hidden, k))
            .collect::<Result<Vec<_>>>()?;
        assign_from_logits(&logits, mode)
    }

    pub fn cluster_map(&self) -> Vec<(usize, usize)> {
        global_cluster_map(&self.cluster.head_sizes())
    }

    /// Accuracy of `encoder` on one task when only that task's head is
    /// consulted.
    pub fn head_accuracy(&self, encoder: &Mlp, head: usize, x: &Matrix, truth: &[usize]) -> Result<f64> {
        let hidden = self.cluster.infer_hidden(&encoder.infer(x)?)?;
        let pred = self.cluster.infer_head_logits(&hidden, head)?.argmax_rows();
        clustering_accuracy(&pred, truth)
    }

    /// Teacher and current-student accuracy on the current task through its
    /// own head.
    pub fn distillation_accuracy(&self, x: &Matrix, truth: &[usize]) -> Result<(f64, f64)> {
        let head = self
            .task
            .checked_sub(1)
            .ok_or_else(|| Error::contract("no task has started"))?;
        let student = self
            .pool
            .current()
            .ok_or_else(|| Error::contract("no current student"))?;
        Ok((
            self.head_accuracy(&self.teacher, head, x, truth)?,
            self.head_accuracy(student, head, x, truth)?,
        ))
    }
}
