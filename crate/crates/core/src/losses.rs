//! Contrastive, distillation, cluster-level and student-imitation losses.
//!
//! All contrastive terms share one shape: each of the `2n` anchors (view `a`
//! rows first, then view `b`) is scored against a positive key, and the
//! denominator runs over the keys of every *other* sample in both views,
//! plus any extra keys (prototypes). Neither view of the anchor's own sample
//! appears in the denominator. Similarities are raw cosines divided by the
//! temperature, and logs are natural.

use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::{cosine_matrix, Tensor};

/// The same quantity computed on augmentation `a` and augmentation `b`.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl ViewPair {
    pub fn new(a: Tensor, b: Tensor) -> Self {
        ViewPair { a, b }
    }

    pub fn detach(&self) -> ViewPair {
        ViewPair::new(self.a.detach(), self.b.detach())
    }

    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::concat_rows(&[self.a.clone(), self.b.clone()])
    }

    fn check(&self, what: &'static str) -> Result<()> {
        if self.a.shape() != self.b.shape() {
            return Err(Error::Shape {
                op: what,
                left: self.a.shape(),
                right: self.b.shape(),
            });
        }
        Ok(())
    }
}

/// Which key counts as the positive for an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    /// The other augmentation of the same sample.
    OtherView,
    /// The key in the same row (same sample, same augmentation).
    SameView,
}

/// Mean over `2n` anchors of `−log(exp(s_pos) / Σ_den exp(s))`.
pub fn paired_contrastive(
    anchors: &Tensor,
    keys: &Tensor,
    extra: Option<&Tensor>,
    positive: Positive,
    temperature: f64,
) -> Result<Tensor> {
    if anchors.rows() != keys.rows() || !anchors.rows().is_multiple_of(2) {
        return Err(Error::Shape {
            op: "paired_contrastive",
            left: anchors.shape(),
            right: keys.shape(),
        });
    }
    let rows = anchors.rows();
    let n = rows / 2;
    let extra_rows = extra.map_or(0, Tensor::rows);
    if n < 2 {
        return Err(Error::contract(format!(
            "contrastive loss needs at least 2 samples per view, got {n}"
        )));
    }

    let mut sims = cosine_matrix(anchors, keys)?;
    if let Some(extra) = extra.filter(|e| e.rows() > 0) {
        let extra_sims = cosine_matrix(anchors, extra)?;
        sims = Tensor::concat_rows(&[sims.transpose(), extra_sims.transpose()])?.transpose();
    }
    if temperature != 1.0 {
        sims = sims.scale(1.0 / temperature);
    }

    let cols = rows + extra_rows;
    let mut denom = vec![false; rows * cols];
    let mut pos = vec![0.0; rows * cols];
    for r in 0..rows {
        let sample = r % n;
        for c in 0..cols {
            denom[r * cols + c] = c >= rows || c % n != sample;
        }
        let p = match positive {
            Positive::OtherView => (r + n) % rows,
            Positive::SameView => r,
        };
        pos[r * cols + p] = 1.0;
    }
    let pos = Tensor::new(rows, cols, pos)?;
    let positives = sims.mul(&pos)?.row_sums();
    let log_denominators = sims.logsumexp_masked(&denom)?;
    Ok(log_denominators.sub(&positives)?.mean())
}

/// Instance-level contrastive loss of the teacher projections, with stored
/// prototypes (one per row) joining every denominator.
pub fn loss_con(z: &ViewPair, prototypes: Option<&Tensor>, temperature: f64) -> Result<Tensor> {
    z.check("loss_con")?;
    let stacked = z.stacked()?;
    paired_contrastive(&stacked, &stacked, prototypes, Positive::OtherView, temperature)
}

/// Distillation from frozen students into the teacher: each predictor maps
/// the teacher projections towards the matching detached student
/// projections. Averaged over students; zero when there are none.
pub fn loss_dis(
    z: &ViewPair,
    students: &[ViewPair],
    predictors: &[Mlp],
    temperature: f64,
) -> Result<Tensor> {
    if students.len() != predictors.len() {
        return Err(Error::contract(format!(
            "{} student projections but {} predictors",
            students.len(),
            predictors.len()
        )));
    }
    if students.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    z.check("loss_dis")?;
    let stacked = z.stacked()?;
    let mut total: Option<Tensor> = None;
    for (target, g) in students.iter().zip(predictors) {
        target.check("loss_dis")?;
        let predicted = g.forward(&stacked)?;
        let keys = target.detach().stacked()?;
        let term = paired_contrastive(&predicted, &keys, None, Positive::SameView, temperature)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / students.len() as f64))
}

/// `H(F) = Σ_k Σ_j −Q(f_jk) ln Q(f_jk)` with `Q(f_jk) = ‖f_jk‖₁ / ‖F_k‖₁`.
pub fn cluster_entropy(f: &ViewPair) -> Result<Tensor> {
    let view = |m: &Tensor| -> Result<Tensor> {
        let q = m.abs().col_sums().div_scalar(&m.l1_norm())?;
        Ok(q.mul(&q.log()?)?.sum().scale(-1.0))
    };
    view(&f.a)?.add(&view(&f.b)?)
}

/// Cluster-level contrastive loss over the columns of `F_a`, `F_b`, minus
/// the assignment entropy.
pub fn loss_clu(f: &ViewPair, temperature: f64) -> Result<Tensor> {
    f.check("loss_clu")?;
    if f.a.cols() < 2 {
        return Err(Error::contract("cluster loss needs at least 2 clusters"));
    }
    for m in [&f.a, &f.b] {
        for r in 0..m.rows() {
            let s: f64 = m.matrix().row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 || m.matrix().row(r).iter().any(|&p| p < 0.0) {
                return Err(Error::contract(format!(
                    "cluster probabilities row {r} sums to {s}"
                )));
            }
        }
    }
    let columns = Tensor::concat_rows(&[f.a.transpose(), f.b.transpose()])?;
    let contrast = paired_contrastive(&columns, &columns, None, Positive::OtherView, temperature)?;
    contrast.sub(&cluster_entropy(f)?)
}

/// `(1/|h|)·‖h_s − h_t‖²` averaged over the `2n` rows.
pub fn latent_mse(student: &ViewPair, teacher: &ViewPair) -> Result<Tensor> {
    let s = student.stacked()?;
    let t = teacher.detach().stacked()?;
    let d = s.sub(&t)?;
    Ok(d.mul(&d)?.mean())
}

/// Student imitation loss: latent MSE to the detached teacher plus a
/// relational contrastive term between student and teacher projections.
pub fn loss_stu(
    student_h: &ViewPair,
    student_z: &ViewPair,
    teacher_h: &ViewPair,
    teacher_z: &ViewPair,
    temperature: f64,
) -> Result<Tensor> {
    let mse = latent_mse(student_h, teacher_h)?;
    let anchors = student_z.stacked()?;
    let keys = teacher_z.detach().stacked()?;
    let contrast = paired_contrastive(&anchors, &keys, None, Positive::SameView, temperature)?;
    mse.add(&contrast)
}

/// Everything the forward phase needs for one batch.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    /// Teacher projections `z^T`.
    pub z: ViewPair,
    /// Cluster probabilities `F`.
    pub f: ViewPair,
    /// Detached projections of each distillation source.
    pub student_z: Vec<ViewPair>,
}

/// The three forward-phase terms and their unweighted sum.
#[derive(Clone, Debug)]
pub struct ForwardLoss {
    pub total: Tensor,
    pub con: f64,
    pub dis: f64,
    pub clu: f64,
}

pub fn combined_forward_loss(
    batch: &BatchEmbeddings,
    prototypes: Option<&Tensor>,
    predictors: &[Mlp],
    temperature: f64,
) -> Result<ForwardLoss> {
    let con = loss_con(&batch.z, prototypes, temperature)?;
    let clu = loss_clu(&batch.f, temperature)?;
    let mut total = con.add(&clu)?;
    let mut dis_value = 0.0;
    if !batch.student_z.is_empty() {
        let dis = loss_dis(&batch.z, &batch.student_z, predictors, temperature)?;
        dis_value = dis.item()?;
        total = total.add(&dis)?;
    }
    Ok(ForwardLoss {
        con: con.item()?,
        dis: dis_value,
        clu: clu.item()?,
        total,
    })
}
