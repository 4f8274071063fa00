use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use fbcc_core::data::{
    export_csv, generate_stream, load_dataset, save_dataset, subsample_imbalanced, Dataset,
};
use fbcc_core::engine::{
    evaluate_states, run_stream, save_checkpoint, Ablation, Evaluation, ModelState, Report,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{AblateArgs, AblationFlags, EvalArgs, GenerateArgs, StreamArgs, TrainArgs};

pub const DATASET_FILE: &str = "dataset.fbcd";
pub const CSV_FILE: &str = "dataset.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TABLE_FILE: &str = "ablation.csv";
pub const ROWS_FILE: &str = "ablation.json";

pub fn checkpoint_name(task: usize) -> String {
    format!("task_{task:02}.fbcc")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn stream_config(args: &StreamArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(lambdas) = &args.heterogeneous {
        cfg.stream.clusters_per_task = lambdas.clone();
    }
    if let Some(imbalance) = args.imbalanced {
        cfg.imbalance = Some(imbalance);
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, flags: &AblationFlags) {
    let a = &mut cfg.train.ablation;
    a.no_prototypes |= flags.no_prototypes;
    a.no_kd |= flags.no_kd;
    a.single_frozen_teacher |= flags.single_frozen_teacher;
    if flags.students.is_some() {
        cfg.train.students = flags.students;
    }
}

/// The stream described by `cfg`, generated from `seed`.
pub fn make_dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let (_, ds) = generate_stream(&cfg.stream, seed)?;
    Ok(match cfg.imbalance {
        Some(i) => subsample_imbalanced(&ds, i.p_first, i.p_last, seed)?,
        None => ds,
    })
}

fn load(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(load_dataset(path)?)
}

pub fn generate(args: &GenerateArgs) -> Result<RunManifest> {
    let cfg = stream_config(&args.stream)?.resolve()?;
    create_dir(&args.out)?;
    let ds = make_dataset(&cfg, cfg.seed)?;
    let bin = args.out.join(DATASET_FILE);
    let csv = args.out.join(CSV_FILE);
    save_dataset(&ds, &bin)?;
    export_csv(&ds, &csv)?;

    let mut manifest = RunManifest::new("generate", args.stream.config.as_deref(), &cfg, vec![cfg.seed], &args.out);
    manifest.record("dataset", &bin)?;
    manifest.record("dataset_csv", &csv)?;
    manifest.finish()?;
    log::info!(
        "wrote {} tasks ({} samples) to {}",
        ds.num_tasks(),
        ds.tasks.iter().map(|t| t.len()).sum::<usize>(),
        bin.display()
    );
    Ok(manifest)
}

pub fn train(args: &TrainArgs) -> Result<(RunManifest, Report)> {
    let mut cfg = stream_config(&args.stream)?;
    apply_flags(&mut cfg, &args.flags);
    let cfg = cfg.resolve()?;
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", args.stream.config.as_deref(), &cfg, vec![cfg.seed], &args.out);

    let ds = match &args.dataset {
        Some(path) => {
            manifest.record("dataset", path)?;
            load(path)?
        }
        None => {
            let ds = make_dataset(&cfg, cfg.seed)?;
            let path = args.out.join(DATASET_FILE);
            save_dataset(&ds, &path)?;
            manifest.record("dataset", &path)?;
            ds
        }
    };

    let out = run_stream(&cfg.train, &ds)?;
    let ckpt_dir = args.out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    for (t, state) in out.checkpoints.iter().enumerate() {
        let path = ckpt_dir.join(checkpoint_name(t + 1));
        save_checkpoint(state, &path)?;
        manifest.record("checkpoint", &path)?;
    }
    let report_path = args.out.join(REPORT_FILE);
    write(&report_path, out.report.to_json()?)?;
    manifest.record("report", &report_path)?;
    if let Some(plot) = &args.export_plot {
        write(plot, out.report.evaluation.acc_matrix.to_csv())?;
        manifest.record("plot_data", plot)?;
    }
    manifest.finish()?;

    let ev = &out.report.evaluation;
    log::info!(
        "{}: ACC-bar {:.4}, F-bar {}",
        out.report.ablation,
        ev.average_acc,
        ev.average_forgetting.map_or("n/a".into(), |f| format!("{f:.4}"))
    );
    Ok((manifest, out.report))
}

/// Locates the checkpoint directory and the run directory above it.
fn checkpoint_dirs(path: &Path) -> (PathBuf, PathBuf) {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        (nested, path.to_path_buf())
    } else {
        let run = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (path.to_path_buf(), run)
    }
}

pub fn eval(args: &EvalArgs) -> Result<Evaluation> {
    let (ckpt_dir, run_dir) = checkpoint_dirs(&args.checkpoints);
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let manifest = run_dir.join(MANIFEST_FILE);
            if manifest.is_file() {
                RunManifest::load(&manifest)?.config
            } else {
                RunConfig::default()
            }
        }
    };
    let ds = load(&args.dataset)?;
    let states = (1..=ds.num_tasks())
        .map(|t| {
            let path = ckpt_dir.join(checkpoint_name(t));
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            Ok(fbcc_core::engine::decode_checkpoint(&bytes)?)
        })
        .collect::<Result<Vec<ModelState>>>()?;
    let ev = evaluate_states(&states, &ds, cfg.train.assign_mode, cfg.train.alpha)?;
    let json = serde_json::to_string_pretty(&ev)?;
    match &args.out {
        Some(path) => write(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(plot) = &args.export_plot {
        write(plot, ev.acc_matrix.to_csv())?;
    }
    Ok(ev)
}

/// One method of an ablation sweep across all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub seeds: Vec<u64>,
    pub acc: Vec<f64>,
    pub forgetting: Vec<Option<f64>>,
}

impl AblationRow {
    pub fn mean_acc(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len() as f64
    }

    /// `None` when any run had a single task.
    pub fn mean_forgetting(&self) -> Option<f64> {
        let all: Option<Vec<f64>> = self.forgetting.iter().copied().collect();
        all.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

fn table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,acc_bar,f_bar,seeds\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let f = r.mean_forgetting().map_or(String::new(), |f| f.to_string());
        out.push_str(&format!("{},{},{f},{}\n", r.method, r.mean_acc(), seeds.join(";")));
    }
    out
}

fn print_table(rows: &[AblationRow]) {
    println!("{:<18} {:>9} {:>9}", "Method", "ACC-bar↑", "F-bar↓");
    for r in rows {
        let f = r.mean_forgetting().map_or("-".into(), |f| format!("{:.2}", 100.0 * f));
        println!("{:<18} {:>9.2} {:>9}", r.method, 100.0 * r.mean_acc(), f);
    }
}

pub fn ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let mut cfg = stream_config(&args.stream)?;
    if args.students.is_some() {
        cfg.train.students = args.students;
    }
    if let Some(seeds) = &args.seeds {
        cfg.ablation_seeds = seeds.clone();
    }
    let cfg = cfg.resolve()?;
    let seeds = cfg.sweep_seeds();
    let reports_dir = args.out.join("reports");
    create_dir(&reports_dir)?;
    let mut manifest = RunManifest::new("ablate", args.stream.config.as_deref(), &cfg, seeds.clone(), &args.out);
    let shared = match &args.dataset {
        Some(path) => {
            manifest.record("dataset", path)?;
            Some(load(path)?)
        }
        None => None,
    };

    let mut rows: Vec<AblationRow> = Ablation::SWEEP
        .iter()
        .map(|a| AblationRow {
            method: a.label(),
            seeds: Vec::new(),
            acc: Vec::new(),
            forgetting: Vec::new(),
        })
        .collect();
    let mut failure = None;
    'seeds: for &seed in &seeds {
        let ds = match &shared {
            Some(ds) => ds.clone(),
            None => make_dataset(&cfg, seed)?,
        };
        let results: Vec<fbcc_core::Result<Report>> = thread::scope(|s| {
            let handles: Vec<_> = Ablation::SWEEP
                .iter()
                .map(|&ablation| {
                    let mut train = cfg.train.clone();
                    train.seed = seed;
                    train.ablation = ablation;
                    let ds = &ds;
                    s.spawn(move || run_stream(&train, ds).map(|o| o.report))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation run panicked")).collect()
        });
        for (row, result) in rows.iter_mut().zip(results) {
            match result {
                Ok(report) => {
                    let path = reports_dir.join(format!("{}-seed{seed}.json", slug(&row.method)));
                    write(&path, report.to_json()?)?;
                    manifest.record("report", &path)?;
                    row.seeds.push(seed);
                    row.acc.push(report.evaluation.average_acc);
                    row.forgetting.push(report.evaluation.average_forgetting);
                }
                Err(e) => {
                    log::error!("{} with seed {seed} failed: {e}", row.method);
                    failure = Some(e);
                }
            }
        }
        if failure.is_some() {
            break 'seeds;
        }
    }

    let completed: Vec<AblationRow> = rows.into_iter().filter(|r| !r.acc.is_empty()).collect();
    let table = args.out.join(TABLE_FILE);
    write(&table, table_csv(&completed))?;
    manifest.record("ablation_table", &table)?;
    let detail = args.out.join(ROWS_FILE);
    write(&detail, serde_json::to_string_pretty(&completed)?)?;
    manifest.record("ablation_rows", &detail)?;
    manifest.finish()?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    print_table(&completed);

    if args.assert_directional {
        let f = |label: &str| {
            completed
                .iter()
                .find(|r| r.method == label)
                .and_then(AblationRow::mean_forgetting)
                .ok_or_else(|| CliError::Usage("directional check needs at least two tasks".into()))
        };
        let (full, no_kd) = (f(&Ablation::DEFAULT.label())?, f(&Ablation::NO_KD.label())?);
        if full >= no_kd {
            return Err(CliError::Assertion(format!(
                "F-bar of FBCC ({full:.4}) is not below FBCC w/o KD ({no_kd:.4})"
            )));
        }
    }
    Ok(completed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_friendly() {
        assert_eq!(slug("FBCC w/o KD"), "fbcc-w-o-kd");
        assert_eq!(slug("FBCC + CaSSLe"), "fbcc-cassle");
    }

    #[test]
    fn row_means() {
        let row = AblationRow {
            method: "FBCC".into(),
            seeds: vec![0, 1],
            acc: vec![0.5, 1.0],
            forgetting: vec![Some(0.25), Some(0.75)],
        };
        assert_eq!(row.mean_acc(), 0.75);
        assert_eq!(row.mean_forgetting(), Some(0.5));
        let single = AblationRow {
            forgetting: vec![None],
            ..row
        };
        assert_eq!(single.mean_forgetting(), None);
        assert_eq!(table_csv(&[single]).lines().nth(1).unwrap(), "FBCC,0.75,,0;1");
    }
}
