//! The continual training loop: per-task setup, forward and backward
//! distillation steps, prototype maintenance, checkpoints and reports.

mod checkpoint;
mod config;
mod report;
mod state;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Ablation, AssignMode, TrainConfig};
pub use report::{
    evaluate_states, run_stream, EpochLoss, Evaluation, ParamCounts, PrototypeCensus, Report,
    RunOutput, TaskCurve,
};
pub use state::{
    assign_from_logits, global_cluster_map, student_count, ModelState, PoolEntry, Prototype,
    PrototypeAccumulator, PrototypeSet, StudentPool,
};

use crate::data::{augment_batch, TaskData};
use crate::error::{Error, Result};
use crate::losses::{combined_forward_loss, loss_stu, BatchEmbeddings, ViewPair};
use crate::model::{ClusterProjector, Mlp};
use crate::rng::{derive_rng, Purpose};
use crate::tensor::{Matrix, Tensor};

/// Loss terms of one forward-distillation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardStep {
    pub total: f64,
    pub con: f64,
    pub dis: f64,
    pub clu: f64,
    /// Largest gradient that reached any student during the step.
    pub student_grad: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardStep {
    pub loss: f64,
    /// Largest gradient that reached the teacher, projector, cluster
    /// projector or predictors during the step.
    pub teacher_side_grad: f64,
}

/// Training state for one stream.
pub struct Engine {
    config: TrainConfig,
    num_tasks: usize,
    state: ModelState,
    predictors: Vec<Mlp>,
    finalized: bool,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(config: TrainConfig, num_tasks: usize) -> Result<Self> {
        config.validate(num_tasks)?;
        let sizes = &config.sizes;
        let mut rng = derive_rng(config.seed, Purpose::Init, 0);
        let teacher = Mlp::new(&sizes.teacher_dims(), &mut rng)?;
        let projector = Mlp::new(&sizes.projector_dims(), &mut rng)?;
        let cluster = ClusterProjector::new(sizes.latent_dim, sizes.cluster_hidden, &mut rng);
        let state = ModelState {
            seed: config.seed,
            task: 0,
            teacher,
            projector,
            cluster,
            pool: StudentPool::new(config.pool_capacity(num_tasks)),
            prototypes: PrototypeSet::default(),
            previous_teacher: None,
        };
        Ok(Engine {
            shuffle_rng: derive_rng(config.seed, Purpose::Shuffle, 0),
            augment_rng: derive_rng(config.seed, Purpose::Augment, 0),
            config,
            num_tasks,
            state,
            predictors: Vec::new(),
            finalized: true,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn predictors(&self) -> &[Mlp] {
        &self.predictors
    }

    pub fn task(&self) -> usize {
        self.state.task
    }

    /// Prepares task `t` (1-based) with `clusters` clusters: retires the
    /// previous student into the frozen pool, spawns a new student,
    /// re-initializes the predictors and appends a cluster head.
    pub fn begin_task(&mut self, t: usize, clusters: usize) -> Result<()> {
        if t != self.state.task + 1 {
            return Err(Error::contract(format!(
                "begin_task({t}) called after task {}",
                self.state.task
            )));
        }
        if !self.finalized {
            return Err(Error::contract(format!("task {} was not finalized", self.state.task)));
        }
        if t > self.num_tasks {
            return Err(Error::contract(format!("stream has only {} tasks", self.num_tasks)));
        }
        if clusters < 2 {
            return Err(Error::Config(format!("task {t} needs at least 2 clusters, got {clusters}")));
        }
        let sizes = &self.config.sizes;
        let mut rng = derive_rng(self.config.seed, Purpose::Init, t as u64);
        let student = Mlp::new(&sizes.student_dims(), &mut rng)?;

        let ablation = self.config.ablation;
        if ablation.single_frozen_teacher && t > 1 {
            let mut teacher = self.state.teacher.clone();
            teacher.set_frozen(true);
            let mut projector = self.state.projector.clone();
            projector.set_frozen(true);
            self.state.previous_teacher = Some(PoolEntry {
                task_id: t - 1,
                student: teacher,
                projector,
            });
        }
        self.state.pool.rotate(&self.state.projector, student, t);

        let sources = if ablation.no_kd {
            0
        } else if ablation.single_frozen_teacher {
            usize::from(self.state.previous_teacher.is_some())
        } else {
            self.state.pool.frozen().len()
        };
        self.predictors = (0..sources)
            .map(|_| Mlp::new(&sizes.predictor_dims(), &mut rng))
            .collect::<Result<_>>()?;
        self.state.cluster.spawn_task_head(clusters, &mut rng)?;

        self.shuffle_rng = derive_rng(self.config.seed, Purpose::Shuffle, t as u64);
        self.augment_rng = derive_rng(self.config.seed, Purpose::Augment, t as u64);
        self.state.task = t;
        self.finalized = false;
        Ok(())
    }

    fn active_head(&self) -> Result<usize> {
        if self.state.task == 0 || self.finalized {
            return Err(Error::contract("no task is being trained"));
        }
        Ok(self.state.task - 1)
    }

    /// Frozen encoders (with their projectors) the teacher distills from.
    fn sources(&self) -> Vec<&PoolEntry> {
        let ablation = self.config.ablation;
        if ablation.no_kd {
            Vec::new()
        } else if ablation.single_frozen_teacher {
            self.state.previous_teacher.iter().collect()
        } else {
            self.state.pool.frozen().iter().collect()
        }
    }

    fn student_grad(&self) -> f64 {
        let previous = self.state.previous_teacher.as_ref().map_or(0.0, |e| {
            e.student.max_abs_grad().max(e.projector.max_abs_grad())
        });
        self.state.pool.max_abs_grad().max(previous)
    }

    fn teacher_side_grad(&self) -> f64 {
        [
            self.state.teacher.max_abs_grad(),
            self.state.projector.max_abs_grad(),
            self.state.cluster.max_abs_grad(),
        ]
        .into_iter()
        .chain(self.predictors.iter().map(Mlp::max_abs_grad))
        .fold(0.0, f64::max)
    }

    /// One optimizer step of the teacher, shared projector, active cluster
    /// head and predictors on `L_con + L_dis + L_clu`. Students stay frozen.
    pub fn forward_kd_step(&mut self, xa: &Matrix, xb: &Matrix) -> Result<ForwardStep> {
        let head = self.active_head()?;
        let ta = Tensor::constant(xa.clone());
        let tb = Tensor::constant(xb.clone());
        let st = &self.state;
        let ha = st.teacher.forward(&ta)?;
        let hb = st.teacher.forward(&tb)?;
        let z = ViewPair::new(st.projector.forward(&ha)?, st.projector.forward(&hb)?);
        let f = ViewPair::new(st.cluster.forward(&ha, head)?, st.cluster.forward(&hb, head)?);
        let student_z = self
            .sources()
            .into_iter()
            .map(|src| {
                let za = src.projector.forward(&src.student.forward(&ta)?)?;
                let zb = src.projector.forward(&src.student.forward(&tb)?)?;
                Ok(ViewPair::new(za, zb))
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = if self.config.ablation.no_prototypes {
            None
        } else {
            st.prototypes.matrix()?.map(Tensor::constant)
        };
        let batch = BatchEmbeddings { z, f, student_z };
        let loss = combined_forward_loss(&batch, prototypes.as_ref(), &self.predictors, self.config.temperature)?;
        let total = loss.total.item()?;
        if !total.is_finite() {
            return Err(Error::Domain {
                op: "forward distillation loss",
                value: total,
            });
        }
        loss.total.backward()?;

        let student_grad = self.student_grad();
        if self.config.audit_grads && student_grad != 0.0 {
            return Err(Error::contract(format!(
                "frozen students received gradient {student_grad} during forward distillation"
            )));
        }
        let opt = self.config.optimizer;
        opt.step_mlp(&mut self.state.teacher);
        opt.step_mlp(&mut self.state.projector);
        opt.step_cluster(&mut self.state.cluster, head);
        for g in &mut self.predictors {
            opt.step_mlp(g);
        }
        Ok(ForwardStep {
            total,
            con: loss.con,
            dis: loss.dis,
            clu: loss.clu,
            student_grad,
        })
    }

    /// One optimizer step of the current student on `L_stu`; the teacher and
    /// the shared projector are used without gradient.
    pub fn backward_kd_step(&mut self, xa: &Matrix, xb: &Matrix) -> Result<BackwardStep> {
        self.active_head()?;
        let st = &self.state;
        let student = st
            .pool
            .current()
            .ok_or_else(|| Error::contract("no current student"))?;
        let tha = st.teacher.infer(xa)?;
        let thb = st.teacher.infer(xb)?;
        let tza = st.projector.infer(&tha)?;
        let tzb = st.projector.infer(&thb)?;
        let teacher_h = ViewPair::new(Tensor::constant(tha), Tensor::constant(thb));
        let teacher_z = ViewPair::new(Tensor::constant(tza), Tensor::constant(tzb));

        let sa = student.forward(&Tensor::constant(xa.clone()))?;
        let sb = student.forward(&Tensor::constant(xb.clone()))?;
        let student_z = ViewPair::new(st.projector.forward_detached(&sa)?, st.projector.forward_detached(&sb)?);
        let student_h = ViewPair::new(sa, sb);
        let loss = loss_stu(&student_h, &student_z, &teacher_h, &teacher_z, self.config.temperature)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Domain {
                op: "student imitation loss",
                value,
            });
        }
        loss.backward()?;

        let teacher_side_grad = self.teacher_side_grad();
        if self.config.audit_grads && teacher_side_grad != 0.0 {
            return Err(Error::contract(format!(
                "teacher-side networks received gradient {teacher_side_grad} during backward distillation"
            )));
        }
        let opt = self.config.optimizer;
        if let Some(s) = self.state.pool.current_mut() {
            opt.step_mlp(s);
        }
        Ok(BackwardStep {
            loss: value,
            teacher_side_grad,
        })
    }

    /// Augments a batch and runs the forward then the backward step on it.
    pub fn train_batch(&mut self, x: &Matrix) -> Result<(ForwardStep, BackwardStep)> {
        let (xa, xb) = augment_batch(x, &self.config.augmentation, &mut self.augment_rng)?;
        let fwd = self.forward_kd_step(&xa, &xb)?;
        let bwd = self.backward_kd_step(&xa, &xb)?;
        Ok((fwd, bwd))
    }

    /// One shuffled pass over the task. Batches with fewer than two samples
    /// are skipped.
    pub fn train_epoch(&mut self, data: &TaskData, epoch: usize) -> Result<EpochLoss> {
        if data.len() < 2 {
            return Err(Error::contract(format!(
                "task {} has {} samples; at least 2 are needed",
                data.task_id,
                data.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sum = EpochLoss::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.samples.select_rows(chunk);
            let (fwd, bwd) = self.train_batch(&x).map_err(|e| Error::Phase {
                task: data.task_id,
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            sum.forward += fwd.total;
            sum.con += fwd.con;
            sum.dis += fwd.dis;
            sum.clu += fwd.clu;
            sum.backward += bwd.loss;
            batches += 1;
        }
        Ok(sum.scaled(1.0 / batches as f64))
    }

    /// Ends the current task: appends one prototype per cluster that has
    /// reliable samples. Returns the number of clusters skipped.
    pub fn finish_task(&mut self, data: &TaskData) -> Result<usize> {
        let head = self.active_head()?;
        let task_id = self.state.task;
        let clusters = self.state.cluster.head_sizes()[head];
        let mut rng = derive_rng(self.config.seed, Purpose::Prototype, task_id as u64);
        let mut acc = PrototypeAccumulator::new(clusters, self.state.projector.output_dim());
        let st = &self.state;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(self.config.batch_size) {
            let x = data.samples.select_rows(chunk);
            let (xa, xb) = augment_batch(&x, &self.config.augmentation, &mut rng)?;
            let mut views = Vec::with_capacity(2);
            for xv in [&xa, &xb] {
                let h = st.teacher.infer(xv)?;
                let z = st.projector.infer(&h)?;
                let c = st
                    .cluster
                    .infer_head_logits(&st.cluster.infer_hidden(&h)?, head)?
                    .argmax_rows();
                views.push((z, c));
            }
            acc.add(&views[0].0, &views[1].0, &views[0].1, &views[1].1)?;
        }
        let mut skipped = 0;
        for (v, mean) in acc.finish().into_iter().enumerate() {
            match mean {
                Some(vector) => self.state.prototypes.push(Prototype {
                    task_id,
                    cluster: v,
                    vector,
                }),
                None => {
                    log::warn!("task {task_id}: cluster {v} has no reliable samples, no prototype stored");
                    skipped += 1;
                }
            }
        }
        self.finalized = true;
        Ok(skipped)
    }

    pub fn assign_clusters(&self, x: &Matrix) -> Result<Vec<usize>> {
        self.state.assign_clusters(x, self.config.assign_mode)
    }
}
