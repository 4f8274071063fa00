//! Synthetic task streams of Gaussian blobs, vector augmentations, and
//! dataset persistence.
//!
//! Training code only ever sees [`TaskData`], which has no label field.
//! Labels live in [`GroundTruth`] and are consumed by evaluation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Purpose};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"FBCD";
const VERSION: u32 = 1;
const MAX_PLACEMENT_TRIES: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// λ_t for every task; its length is the number of tasks.
    pub clusters_per_task: Vec<usize>,
    pub input_dim: usize,
    pub stddev: f64,
    pub samples_per_cluster: usize,
    /// Minimum distance between any two means, in units of `stddev`.
    pub min_separation: f64,
    /// Means are drawn uniformly from a cube of this half-width, in units of
    /// `stddev`.
    pub mean_box: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            clusters_per_task: vec![2; 5],
            input_dim: 16,
            stddev: 1.0,
            samples_per_cluster: 200,
            min_separation: 6.0,
            mean_box: 5.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters_per_task.is_empty() {
            return Err(Error::Config("a stream needs at least one task".into()));
        }
        if let Some(bad) = self.clusters_per_task.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("every task needs at least 2 clusters, got {bad}")));
        }
        if self.input_dim == 0 || self.samples_per_cluster == 0 {
            return Err(Error::Config("input_dim and samples_per_cluster must be positive".into()));
        }
        if !(self.stddev > 0.0) || !(self.mean_box > 0.0) || !(self.min_separation >= 0.0) {
            return Err(Error::Config(
                "stddev and mean_box must be positive, min_separation non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.clusters_per_task.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based.
    pub task_id: usize,
    pub num_clusters: usize,
    pub means: Vec<Vec<f64>>,
    pub stddev: f64,
    pub samples_per_cluster: usize,
    pub subsample_prob: f64,
    /// Global label of this task's first cluster.
    pub label_offset: usize,
}

/// Unlabelled samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub num_clusters: usize,
    pub samples: Matrix,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }
}

/// Global cluster labels, `labels[t][i]` for sample `i` of task `t`
/// (0-based task index).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    labels: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(labels: Vec<Vec<usize>>) -> Self {
        GroundTruth { labels }
    }

    pub fn task(&self, index: usize) -> Result<&[usize]> {
        self.labels
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("no ground truth for task index {index}")))
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub tasks: Vec<TaskData>,
    pub truth: GroundTruth,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn clusters_per_task(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.num_clusters).collect()
    }

    fn check(&self) -> Result<()> {
        if self.truth.num_tasks() != self.tasks.len() {
            return Err(Error::contract("ground truth and task list disagree in length"));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if task.samples.cols() != self.input_dim {
                return Err(Error::contract(format!(
                    "task {} has {} features, expected {}",
                    task.task_id,
                    task.samples.cols(),
                    self.input_dim
                )));
            }
            if self.truth.labels[t].len() != task.len() {
                return Err(Error::contract(format!("task {} label count mismatch", task.task_id)));
            }
        }
        Ok(())
    }
}

fn place_means(cfg: &StreamConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let total: usize = cfg.clusters_per_task.iter().sum();
    let half = cfg.mean_box * cfg.stddev;
    let min_dist_sq = (cfg.min_separation * cfg.stddev).powi(2);
    let mut rng = derive_rng(seed, Purpose::Means, 0);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    while means.len() < total {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let candidate: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-half..=half)).collect();
            let clear = means.iter().all(|m| {
                m.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= min_dist_sq
            });
            if clear {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could only place {} of {total} cluster means {}σ apart in {} dimensions; \
                 increase input_dim (or mean_box)",
                means.len(),
                cfg.min_separation,
                cfg.input_dim
            )));
        }
    }
    Ok(means)
}

/// Draws every task of the stream. Means are placed jointly so that all
/// clusters across all tasks are separated; samples of task `t` come from a
/// generator derived from `(seed, t)`.
pub fn generate_stream(cfg: &StreamConfig, seed: u64) -> Result<(Vec<TaskSpec>, Dataset)> {
    cfg.validate()?;
    let mut all_means = place_means(cfg, seed)?.into_iter();
    let mut specs = Vec::with_capacity(cfg.num_tasks());
    let mut tasks = Vec::with_capacity(cfg.num_tasks());
    let mut labels = Vec::with_capacity(cfg.num_tasks());
    let mut offset = 0;
    for (t, &lambda) in cfg.clusters_per_task.iter().enumerate() {
        let task_id = t + 1;
        let means: Vec<Vec<f64>> = all_means.by_ref().take(lambda).collect();
        let mut rng = derive_rng(seed, Purpose::Samples, task_id as u64);
        let rows = lambda * cfg.samples_per_cluster;
        let mut data = Vec::with_capacity(rows * cfg.input_dim);
        let mut task_labels = Vec::with_capacity(rows);
        for (v, mean) in means.iter().enumerate() {
            for _ in 0..cfg.samples_per_cluster {
                for &mu in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + cfg.stddev * z);
                }
                task_labels.push(offset + v);
            }
        }
        tasks.push(TaskData {
            task_id,
            num_clusters: lambda,
            samples: Matrix::new(rows, cfg.input_dim, data)?,
        });
        labels.push(task_labels);
        specs.push(TaskSpec {
            task_id,
            num_clusters: lambda,
            means,
            stddev: cfg.stddev,
            samples_per_cluster: cfg.samples_per_cluster,
            subsample_prob: 1.0,
            label_offset: offset,
        });
        offset += lambda;
    }
    let dataset = Dataset {
        input_dim: cfg.input_dim,
        tasks,
        truth: GroundTruth::new(labels),
    };
    Ok((specs, dataset))
}

/// Retention probability of every task under a linear schedule.
pub fn imbalance_schedule(tasks: usize, p_first: f64, p_last: f64) -> Result<Vec<f64>> {
    if !(p_first > 0.0 && p_first <= p_last && p_last <= 1.0) {
        return Err(Error::Config(format!(
            "need 0 < p_first <= p_last <= 1, got {p_first} and {p_last}"
        )));
    }
    match tasks {
        0 => Err(Error::Config("imbalance schedule needs at least one task".into())),
        1 if p_first != p_last => Err(Error::Config(
            "a single-task stream cannot interpolate between different probabilities".into(),
        )),
        1 => Ok(vec![p_first]),
        n => Ok((0..n)
            .map(|t| p_first + (p_last - p_first) * t as f64 / (n - 1) as f64)
            .collect()),
    }
}

/// Keeps each sample of task `t` independently with probability `p_t`.
pub fn subsample_imbalanced(ds: &Dataset, p_first: f64, p_last: f64, seed: u64) -> Result<Dataset> {
    let probs = imbalance_schedule(ds.num_tasks(), p_first, p_last)?;
    let mut tasks = Vec::with_capacity(ds.num_tasks());
    let mut labels = Vec::with_capacity(ds.num_tasks());
    for (t, (task, &p)) in ds.tasks.iter().zip(&probs).enumerate() {
        let truth = ds.truth.task(t)?;
        if p >= 1.0 {
            tasks.push(task.clone());
            labels.push(truth.to_vec());
            continue;
        }
        let mut rng = derive_rng(seed, Purpose::Subsample, task.task_id as u64);
        let keep: Vec<usize> = (0..task.len()).filter(|_| rng.random::<f64>() < p).collect();
        tasks.push(TaskData {
            task_id: task.task_id,
            num_clusters: task.num_clusters,
            samples: task.samples.select_rows(&keep),
        });
        labels.push(keep.iter().map(|&i| truth[i]).collect());
    }
    Ok(Dataset {
        input_dim: ds.input_dim,
        tasks,
        truth: GroundTruth::new(labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub noise_sigma: f64,
    pub coord_dropout_prob: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            noise_sigma: 0.15,
            coord_dropout_prob: 0.1,
            scale_jitter: 0.05,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            noise_sigma: 0.0,
            coord_dropout_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.scale_jitter >= 0.0) {
            return Err(Error::Config("noise_sigma and scale_jitter must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.coord_dropout_prob) {
            return Err(Error::Config(format!(
                "coord_dropout_prob {} outside [0, 1)",
                self.coord_dropout_prob
            )));
        }
        Ok(())
    }
}

/// One random view: scale by a jitter multiplier, add Gaussian noise, then
/// zero coordinates at random. Always consumes `1 + 2·d` draws.
pub fn augment<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentationConfig, rng: &mut R) -> Vec<f64> {
    let u: f64 = rng.random();
    let scale = 1.0 + cfg.scale_jitter * (2.0 * u - 1.0);
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            let drop = rng.random::<f64>() < cfg.coord_dropout_prob;
            if drop {
                0.0
            } else {
                v * scale + cfg.noise_sigma * z
            }
        })
        .collect()
}

pub fn augment_pair<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = augment(x, cfg, rng);
    let b = augment(x, cfg, rng);
    (a, b)
}

/// Both views of every row of `x`, row by row.
pub fn augment_batch<R: Rng + ?Sized>(
    x: &Matrix,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    let mut a = Vec::with_capacity(x.data().len());
    let mut b = Vec::with_capacity(x.data().len());
    for r in 0..x.rows() {
        let (va, vb) = augment_pair(x.row(r), cfg, rng);
        a.extend(va);
        b.extend(vb);
    }
    Ok((Matrix::new(x.rows(), x.cols(), a)?, Matrix::new(x.rows(), x.cols(), b)?))
}

/// FBCD v1: magic, version, task count and width, one
/// `(task_id, λ, count)` header per task, then each task's features
/// followed by its labels. Everything little-endian.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check()?;
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.usize32(ds.num_tasks())?;
    w.usize32(ds.input_dim)?;
    for task in &ds.tasks {
        w.usize32(task.task_id)?;
        w.usize32(task.num_clusters)?;
        w.u64(task.len() as u64);
    }
    for (t, task) in ds.tasks.iter().enumerate() {
        w.f64s(task.samples.data());
        for &label in ds.truth.task(t)? {
            w.u64(label as u64);
        }
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FBCD version {version}")));
    }
    let num_tasks = r.u32()? as usize;
    let input_dim = r.u32()? as usize;
    let mut headers = Vec::with_capacity(num_tasks.min(1 << 16));
    for _ in 0..num_tasks {
        let task_id = r.u32()? as usize;
        let num_clusters = r.u32()? as usize;
        let count = usize::try_from(r.u64()?)
            .map_err(|_| Error::Format("sample count does not fit in memory".into()))?;
        headers.push((task_id, num_clusters, count));
    }
    let mut tasks = Vec::with_capacity(headers.len());
    let mut labels = Vec::with_capacity(headers.len());
    for (task_id, num_clusters, count) in headers {
        let len = count
            .checked_mul(input_dim)
            .ok_or_else(|| Error::Format("sample block size overflows".into()))?;
        let data = r.f64s(len)?;
        let mut task_labels = Vec::with_capacity(count.min(bytes.len() / 8));
        for _ in 0..count {
            task_labels.push(r.u64()? as usize);
        }
        tasks.push(TaskData {
            task_id,
            num_clusters,
            samples: Matrix::new(count, input_dim, data)?,
        });
        labels.push(task_labels);
    }
    r.finish()?;
    Ok(Dataset {
        input_dim,
        tasks,
        truth: GroundTruth::new(labels),
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Writes `task_id,label,feat_0..feat_{d-1}` rows, features with 17
/// significant digits.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    ds.check()?;
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["task_id".to_string(), "label".to_string()];
    header.extend((0..ds.input_dim).map(|j| format!("feat_{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (t, task) in ds.tasks.iter().enumerate() {
        let truth = ds.truth.task(t)?;
        for (i, &label) in truth.iter().enumerate() {
            let mut record = vec![task.task_id.to_string(), label.to_string()];
            record.extend(task.samples.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&record).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`export_csv`]. The cluster count of each task is
/// the number of distinct labels it contains.
pub fn import_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.len() < 3 || &headers[0] != "task_id" || &headers[1] != "label" {
        return Err(Error::Format("CSV header must start with task_id,label,feat_0".into()));
    }
    let input_dim = headers.len() - 2;
    let mut tasks: Vec<(usize, Vec<f64>, Vec<usize>)> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let parse_err = |what: &str| Error::Format(format!("CSV row {}: bad {what}", line + 2));
        let task_id: usize = record[0].parse().map_err(|_| parse_err("task_id"))?;
        let label: usize = record[1].parse().map_err(|_| parse_err("label"))?;
        if tasks.last().map(|t| t.0) != Some(task_id) {
            if tasks.iter().any(|t| t.0 == task_id) {
                return Err(Error::Format(format!("task {task_id} rows are not contiguous")));
            }
            tasks.push((task_id, Vec::new(), Vec::new()));
        }
        let entry = tasks.last_mut().expect("pushed above");
        for field in record.iter().skip(2) {
            entry.1.push(field.parse().map_err(|_| parse_err("feature"))?);
        }
        entry.2.push(label);
    }
    let mut out_tasks = Vec::with_capacity(tasks.len());
    let mut labels = Vec::with_capacity(tasks.len());
    for (task_id, data, task_labels) in tasks {
        let mut distinct = task_labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        out_tasks.push(TaskData {
            task_id,
            num_clusters: distinct.len(),
            samples: Matrix::new(task_labels.len(), input_dim, data)?,
        });
        labels.push(task_labels);
    }
    Ok(Dataset {
        input_dim,
        tasks: out_tasks,
        truth: GroundTruth::new(labels),
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}
