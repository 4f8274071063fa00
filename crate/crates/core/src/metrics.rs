//! Clustering accuracy under optimal label matching, the accuracy matrix
//! with its continual-learning summaries, and teacher/student distillation
//! scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of samples correctly labelled under the best one-to-one
/// matching between predicted cluster ids and true labels.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "clustering accuracy needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let pred_ids = dense_ids(pred);
    let truth_ids = dense_ids(truth);
    let size = pred_ids.len().max(truth_ids.len());

    let mut counts = vec![vec![0i64; size]; size];
    for (p, t) in pred.iter().zip(truth) {
        counts[pred_ids[p]][truth_ids[t]] += 1;
    }
    let cost: Vec<Vec<i64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -c).collect())
        .collect();
    let assignment = min_cost_assignment(&cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| counts[r][c])
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

fn dense_ids(ids: &[usize]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for &id in ids {
        let next = map.len();
        map.entry(id).or_insert(next);
    }
    map
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials). Returns the column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = i64::MAX;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// `ACC_{i,j}`: accuracy on task `i` after training task `j`, defined for
/// `i ≤ j`. Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    tasks: usize,
    /// `rows[i][j]`, `None` where undefined or not yet measured.
    rows: Vec<Vec<Option<f64>>>,
}

impl AccMatrix {
    pub fn new(tasks: usize) -> Self {
        AccMatrix {
            tasks,
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        if task > after || after >= self.tasks {
            return Err(Error::contract(format!(
                "ACC[{task}][{after}] is outside the lower triangle of a {0}x{0} matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::contract(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[task][after] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.rows.get(task)?.get(after).copied().flatten()
    }

    fn require(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)
            .ok_or_else(|| Error::contract(format!("ACC[{task}][{after}] is missing")))
    }

    /// Builds a matrix from per-task rows where `rows[i]` lists
    /// `ACC_{i,i}, ACC_{i,i+1}, …`.
    pub fn from_triangle(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccMatrix::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            for (k, &acc) in row.iter().enumerate() {
                m.set(i, i + k, acc)?;
            }
        }
        Ok(m)
    }

    /// CSV with header `task,after_task,acc`, 1-based task numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,after_task,acc\n");
        for i in 0..self.tasks {
            for j in i..self.tasks {
                if let Some(acc) = self.get(i, j) {
                    out.push_str(&format!("{},{},{acc}\n", i + 1, j + 1));
                }
            }
        }
        out
    }
}

/// Mean final accuracy over all tasks.
pub fn average_acc(m: &AccMatrix) -> Result<f64> {
    let n = m.tasks();
    if n == 0 {
        return Err(Error::contract("empty accuracy matrix"));
    }
    let last = n - 1;
    let total = (0..n).map(|t| m.require(t, last)).sum::<Result<f64>>()?;
    Ok(total / n as f64)
}

/// Mean over the first `N−1` tasks of the largest drop from any earlier
/// measurement (after task `t`, `i ≤ t < N−1`) to the final one. Drops may
/// be negative.
pub fn average_forgetting(m: &AccMatrix) -> Result<f64> {
    let n = m.tasks();
    if n < 2 {
        return Err(Error::contract("forgetting needs at least two tasks"));
    }
    let last = n - 1;
    let mut total = 0.0;
    for i in 0..last {
        let fin = m.require(i, last)?;
        let mut worst = f64::NEG_INFINITY;
        for t in i..last {
            worst = worst.max(m.require(i, t)? - fin);
        }
        total += worst;
    }
    Ok(total / last as f64)
}

/// Per-task teacher and student accuracies measured right after each task,
/// plus the model sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationRecord {
    pub teacher_acc: Vec<f64>,
    pub student_acc: Vec<f64>,
    pub param_count_student: usize,
    pub param_count_teacher: usize,
    pub alpha: f64,
}

impl DistillationRecord {
    fn check(&self) -> Result<()> {
        if self.teacher_acc.is_empty() || self.teacher_acc.len() != self.student_acc.len() {
            return Err(Error::contract("teacher and student accuracy series must be complete"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.param_count_student == 0 || self.param_count_teacher == 0 {
            return Err(Error::contract("parameter counts must be positive"));
        }
        Ok(())
    }
}

/// Mean teacher-minus-student accuracy gap. Negative when students win.
pub fn acc_hat(rec: &DistillationRecord) -> Result<f64> {
    rec.check()?;
    let gap: f64 = rec
        .teacher_acc
        .iter()
        .zip(&rec.student_acc)
        .map(|(t, s)| t - s)
        .sum();
    Ok(gap / rec.teacher_acc.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationScore {
    pub score: f64,
    /// `α · #Param_S / #Param_T`
    pub size_term: f64,
    /// `(1 − α) · (1 − mean(ACC^S / ACC^T))`
    pub accuracy_term: f64,
}

/// Size/accuracy trade-off of the students; lower is better.
pub fn distillation_score(rec: &DistillationRecord) -> Result<DistillationScore> {
    rec.check()?;
    if let Some(bad) = rec.teacher_acc.iter().find(|&&a| a <= 0.0) {
        return Err(Error::contract(format!("teacher accuracy {bad} must be positive")));
    }
    let ratio = rec.param_count_student as f64 / rec.param_count_teacher as f64;
    let mean_acc_ratio = rec
        .student_acc
        .iter()
        .zip(&rec.teacher_acc)
        .map(|(s, t)| s / t)
        .sum::<f64>()
        / rec.teacher_acc.len() as f64;
    let size_term = rec.alpha * ratio;
    let accuracy_term = (1.0 - rec.alpha) * (1.0 - mean_acc_ratio);
    Ok(DistillationScore {
        score: size_term + accuracy_term,
        size_term,
        accuracy_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_accuracy(&truth, &truth).unwrap(), 1.0);
        let permuted: Vec<usize> = truth.iter().map(|&t| [7, 3, 5][t]).collect();
        assert_eq!(clustering_accuracy(&permuted, &truth).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_handles_rectangular_contingency() {
        // three predicted clusters, two labels: best matching keeps 4 of 5
        assert_eq!(clustering_accuracy(&[0, 0, 1, 2, 2], &[0, 0, 1, 1, 1]).unwrap(), 0.8);
        // one predicted cluster for two labels
        assert_eq!(clustering_accuracy(&[4, 4, 4, 4], &[0, 0, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_rejects_empty_or_ragged() {
        assert!(clustering_accuracy(&[], &[]).is_err());
        assert!(clustering_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn assignment_on_small_matrix() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = min_cost_assignment(&cost);
        let total: i64 = a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn average_acc_examples() {
        let m = AccMatrix::from_triangle(&[vec![1.0, 0.6], vec![0.8]]).unwrap();
        assert!((average_acc(&m).unwrap() - 0.7).abs() < 1e-15);
        let ones = AccMatrix::from_triangle(&[vec![1.0; 3], vec![1.0; 2], vec![1.0]]).unwrap();
        assert_eq!(average_acc(&ones).unwrap(), 1.0);
        let partial = AccMatrix::from_triangle(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(average_acc(&partial).is_err());
    }

    #[test]
    fn forgetting_hand_case() {
        let m = AccMatrix::from_triangle(&[vec![0.9, 0.8, 0.7], vec![0.85, 0.8], vec![0.95]]).unwrap();
        assert_eq!(average_forgetting(&m).unwrap(), 0.125);
    }

    #[test]
    fn forgetting_allows_negative_and_zero() {
        let improving = AccMatrix::from_triangle(&[vec![0.5, 0.75], vec![0.5]]).unwrap();
        assert_eq!(average_forgetting(&improving).unwrap(), -0.25);
        let flat = AccMatrix::from_triangle(&[vec![0.6; 3], vec![0.7; 2], vec![0.2]]).unwrap();
        assert_eq!(average_forgetting(&flat).unwrap(), 0.0);
        assert!(average_forgetting(&AccMatrix::from_triangle(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn matrix_rejects_upper_triangle_and_bad_values() {
        let mut m = AccMatrix::new(3);
        assert!(m.set(2, 1, 0.5).is_err());
        assert!(m.set(0, 3, 0.5).is_err());
        assert!(m.set(0, 0, 1.5).is_err());
        m.set(0, 1, 0.25).unwrap();
        assert_eq!(m.to_csv(), "task,after_task,acc\n1,2,0.25\n");
    }

    fn record(teacher: Vec<f64>, student: Vec<f64>, ps: usize, pt: usize, alpha: f64) -> DistillationRecord {
        DistillationRecord {
            teacher_acc: teacher,
            student_acc: student,
            param_count_student: ps,
            param_count_teacher: pt,
            alpha,
        }
    }

    #[test]
    fn acc_hat_examples() {
        let same = record(vec![0.9, 0.8], vec![0.9, 0.8], 1, 2, 0.5);
        assert_eq!(acc_hat(&same).unwrap(), 0.0);
        let gaps = record(vec![0.5, 0.5], vec![0.48, 0.46], 1, 2, 0.5);
        assert!((acc_hat(&gaps).unwrap() - 0.03).abs() < 1e-15);
        let better = record(vec![0.5], vec![0.6], 1, 2, 0.5);
        assert!(acc_hat(&better).unwrap() < 0.0);
        assert!(acc_hat(&record(vec![0.5], vec![], 1, 2, 0.5)).is_err());
    }

    #[test]
    fn distillation_score_examples() {
        let identical = record(vec![0.9, 0.7], vec![0.9, 0.7], 10, 10, 0.5);
        assert_eq!(distillation_score(&identical).unwrap().score, 0.5);
        let mixed = record(vec![1.0], vec![0.9], 2, 10, 0.5);
        assert!((distillation_score(&mixed).unwrap().score - 0.15).abs() < 1e-15);
        let size_only = record(vec![0.8, 0.4], vec![0.3, 0.1], 3, 7, 1.0);
        assert_eq!(distillation_score(&size_only).unwrap().score, 3.0 / 7.0);
        assert!(distillation_score(&record(vec![0.0], vec![0.0], 1, 2, 0.5)).is_err());
    }
}
