//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Criteria 7 to 9 measure training quality on synthetic streams. Their
//! outcome is printed but does not fail the process; every other criterion
//! is a correctness property and does.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fbcc_core::data::{generate_stream, imbalance_schedule, subsample_imbalanced, Dataset, StreamConfig};
use fbcc_core::engine::{run_stream, Ablation, Engine, TrainConfig};
use fbcc_core::losses::{
    cluster_entropy, combined_forward_loss, latent_mse, loss_clu, loss_con, loss_dis, loss_stu,
    BatchEmbeddings, ViewPair,
};
use fbcc_core::metrics::{
    average_forgetting, clustering_accuracy, distillation_score, AccMatrix, DistillationRecord,
};
use fbcc_core::model::{Activation, Dense, Mlp, ModelSizes};
use fbcc_core::tensor::{finite_diff_check, Matrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn constant(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::constant(random_matrix(rng, r, c))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn basis_rows(dim: usize, first: usize, count: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (first..first + count)
        .map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Two samples per view, all four projections distinct unit vectors.
fn orthogonal_batch(offset: usize) -> ViewPair {
    ViewPair::new(basis_rows(8, offset, 2), basis_rows(8, offset + 2, 2))
}

fn criterion_1() -> Outcome {
    const INSTANCES: usize = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(err),
        None => worst.push((name, err)),
    };
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..5);
        let d = rng.random_range(3..7);
        let lambda = rng.random_range(2..5);

        let other = constant(&mut rng, n, d);
        let protos = constant(&mut rng, 2, d);
        let x = random_matrix(&mut rng, n, d);
        let err = finite_diff_check(|t| loss_con(&ViewPair::new(t.clone(), other.clone()), Some(&protos), 1.0), &x, 1e-5);
        record("loss_con", err.unwrap());

        let g = Mlp::new(&[d, d + 1, d], &mut rng).unwrap();
        let students = [ViewPair::new(constant(&mut rng, n, d), constant(&mut rng, n, d))];
        let zb = constant(&mut rng, n, d);
        let err = finite_diff_check(
            |t| loss_dis(&ViewPair::new(t.clone(), zb.clone()), &students, std::slice::from_ref(&g), 1.0),
            &x,
            1e-5,
        );
        record("loss_dis", err.unwrap());

        let logits = random_matrix(&mut rng, n + 1, lambda);
        let fb = constant(&mut rng, n + 1, lambda).softmax_rows();
        let err = finite_diff_check(|t| loss_clu(&ViewPair::new(t.softmax_rows(), fb.clone()), 1.0), &logits, 1e-5);
        record("loss_clu", err.unwrap());
        let err = finite_diff_check(|t| cluster_entropy(&ViewPair::new(t.softmax_rows(), fb.clone())), &logits, 1e-5);
        record("entropy", err.unwrap());

        let w = constant(&mut rng, d, d);
        let th = ViewPair::new(constant(&mut rng, n, d), constant(&mut rng, n, d));
        let tz = ViewPair::new(constant(&mut rng, n, d), constant(&mut rng, n, d));
        let hb = constant(&mut rng, n, d);
        let err = finite_diff_check(
            |t| {
                let sh = ViewPair::new(t.clone(), hb.clone());
                let sz = ViewPair::new(t.matmul(&w)?, hb.matmul(&w)?.relu());
                loss_stu(&sh, &sz, &th, &tz, 1.0)
            },
            &x,
            1e-5,
        );
        record("loss_stu", err.unwrap());
        let err = finite_diff_check(|t| latent_mse(&ViewPair::new(t.clone(), hb.clone()), &th), &x, 1e-5);
        record("latent_mse", err.unwrap());

        let f_logits = constant(&mut rng, n, d);
        let err = finite_diff_check(
            |t| {
                let batch = BatchEmbeddings {
                    z: ViewPair::new(t.clone(), zb.clone()),
                    f: ViewPair::new(t.softmax_rows(), f_logits.softmax_rows()),
                    student_z: students.to_vec(),
                };
                Ok(combined_forward_loss(&batch, Some(&protos), std::slice::from_ref(&g), 1.0)?.total)
            },
            &x,
            1e-5,
        );
        record("combined", err.unwrap());
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|(_, e)| *e < TOL) && elapsed < Duration::from_secs(60);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::new(
        pass,
        format!("{INSTANCES} instances per loss, worst rel err {}; {:.2}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let identity = Mlp::from_layers(
        vec![Dense::from_values(Matrix::identity(8), vec![0.0; 8], Activation::None).unwrap()],
        false,
    )
    .unwrap();
    let zero_h = ViewPair::new(Tensor::new(2, 3, vec![0.0; 6]).unwrap(), Tensor::new(2, 3, vec![0.0; 6]).unwrap());
    let teacher = orthogonal_batch(0);
    let apart = orthogonal_batch(4);
    let value = |t: fbcc_core::Result<Tensor>| t.unwrap().item().unwrap();
    let cases = [
        ("con", value(loss_con(&teacher, None, 1.0)), LN_2),
        ("dis", value(loss_dis(&teacher, std::slice::from_ref(&apart), std::slice::from_ref(&identity), 1.0)), LN_2),
        ("stu", value(loss_stu(&zero_h, &apart, &zero_h, &teacher, 1.0)), LN_2),
        ("dis matched", value(loss_dis(&teacher, std::slice::from_ref(&teacher), std::slice::from_ref(&identity), 1.0)), LN_2 - 1.0),
        ("stu matched", value(loss_stu(&zero_h, &teacher, &zero_h, &teacher, 1.0)), LN_2 - 1.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let parts: Vec<String> = cases.iter().map(|(n, got, _)| format!("{n} {got:.12}")).collect();
    Outcome::new(worst < 1e-9, format!("{}; max err {worst:.1e}", parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut ok = true;
    let mut worst_uniform: f64 = 0.0;
    let mut smallest_gap = f64::INFINITY;
    for lambda in 2..=6usize {
        let bound = 2.0 * (lambda as f64).ln();
        let rows = 7;
        let u = Tensor::new(rows, lambda, vec![1.0 / lambda as f64; rows * lambda]).unwrap();
        let h = cluster_entropy(&ViewPair::new(u.clone(), u.clone())).unwrap().item().unwrap();
        worst_uniform = worst_uniform.max((h - bound).abs());
        ok &= (h - bound).abs() < 1e-12;
        for _ in 0..50 {
            let noise = random_matrix(&mut rng, rows, lambda);
            let eps = rng.random_range(0.01..1.0);
            let perturbed = Tensor::constant(noise).scale(eps).softmax_rows();
            let other = if rng.random::<bool>() { u.clone() } else { perturbed.clone() };
            let hp = cluster_entropy(&ViewPair::new(perturbed, other)).unwrap().item().unwrap();
            smallest_gap = smallest_gap.min(bound - hp);
            ok &= hp < bound;
        }
    }
    Outcome::new(
        ok,
        format!("uniform error {worst_uniform:.1e}; smallest gap below bound over 250 perturbations {smallest_gap:.2e}"),
    )
}

/// Best matching by exhaustive search over permutations of `k` ids.
fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    fn search(i: usize, k: usize, used: &mut Vec<bool>, map: &mut Vec<usize>, counts: &[Vec<usize>], best: &mut usize) {
        if i == k {
            let total = (0..k).map(|p| counts[p][map[p]]).sum();
            *best = (*best).max(total);
            return;
        }
        for t in 0..k {
            if !used[t] {
                used[t] = true;
                map[i] = t;
                search(i + 1, k, used, map, counts, best);
                used[t] = false;
            }
        }
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut best = 0;
    search(0, k, &mut vec![false; k], &mut vec![0; k], &counts, &mut best);
    best as f64 / pred.len() as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k_pred = rng.random_range(1..=6);
        let k_truth = rng.random_range(1..=6);
        let n = rng.random_range(1..60);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_pred)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_truth)).collect();
        let fast = clustering_accuracy(&pred, &truth).unwrap();
        // ids are compacted before matching, so exhaustive search over the
        // compacted ids is the reference
        let compact = |v: &[usize]| -> Vec<usize> {
            let mut ids: Vec<usize> = v.to_vec();
            ids.sort_unstable();
            ids.dedup();
            v.iter().map(|x| ids.binary_search(x).unwrap()).collect()
        };
        let (p, t) = (compact(&pred), compact(&truth));
        let k = p.iter().chain(&t).max().unwrap() + 1;
        if fast != brute_force_accuracy(&p, &t, k) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches} mismatches over 200 instances"))
}

fn criterion_5() -> Outcome {
    let m = AccMatrix::from_triangle(&[vec![0.9, 0.8, 0.7], vec![0.85, 0.8], vec![0.95]]).unwrap();
    let f = average_forgetting(&m).unwrap();
    Outcome::new(f == 0.125, format!("F-bar = {f}"))
}

fn criterion_6() -> Outcome {
    let cfg = StreamConfig {
        clusters_per_task: vec![2, 2],
        samples_per_cluster: 64,
        ..StreamConfig::default()
    };
    let (_, ds) = generate_stream(&cfg, 106).unwrap();
    let train = TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed: 106,
        audit_grads: false,
        ..TrainConfig::default()
    };
    let mut engine = Engine::new(train, 2).unwrap();
    let mut steps = 0;
    let mut worst_student: f64 = 0.0;
    let mut worst_teacher: f64 = 0.0;
    for task in &ds.tasks {
        engine.begin_task(task.task_id, task.num_clusters).unwrap();
        for _ in 0..3 {
            for start in (0..task.len()).step_by(32) {
                let rows: Vec<usize> = (start..(start + 32).min(task.len())).collect();
                let (fwd, bwd) = engine.train_batch(&task.samples.select_rows(&rows)).unwrap();
                worst_student = worst_student.max(fwd.student_grad);
                worst_teacher = worst_teacher.max(bwd.teacher_side_grad);
                steps += 1;
            }
        }
        engine.finish_task(task).unwrap();
    }
    Outcome::new(
        worst_student == 0.0 && worst_teacher == 0.0,
        format!("{steps} steps; max student grad in forward phase {worst_student}, max teacher-side grad in backward phase {worst_teacher}"),
    )
}

struct RunSummary {
    acc: f64,
    fgt: f64,
    secs: f64,
}

fn run(ds: &Dataset, seed: u64, students: usize, ablation: Ablation) -> RunSummary {
    let cfg = TrainConfig {
        seed,
        students: Some(students),
        ablation,
        sizes: ModelSizes {
            input_dim: ds.input_dim,
            ..ModelSizes::default()
        },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = run_stream(&cfg, ds).unwrap();
    let ev = out.report.evaluation;
    RunSummary {
        acc: ev.average_acc,
        fgt: ev.average_forgetting.expect("multi-task stream"),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn stream(tasks: usize, seed: u64) -> Dataset {
    let cfg = StreamConfig {
        clusters_per_task: vec![2; tasks],
        ..StreamConfig::default()
    };
    generate_stream(&cfg, seed).unwrap().1
}

/// `results[a][s]` for ablation `a` of `Ablation::SWEEP` and seed `s`.
fn ablation_sweep() -> Vec<Vec<RunSummary>> {
    let streams: Vec<Dataset> = SEEDS.iter().map(|&s| stream(5, s)).collect();
    Ablation::SWEEP
        .iter()
        .map(|&ablation| {
            SEEDS
                .iter()
                .zip(&streams)
                .map(|(&seed, ds)| {
                    let r = run(ds, seed, 3, ablation);
                    println!(
                        "    {:<16} seed {seed}: ACC-bar {:.4}  F-bar {:+.4}  ({:.1}s)",
                        ablation.label(),
                        r.acc,
                        r.fgt,
                        r.secs
                    );
                    r
                })
                .collect()
        })
        .collect()
}

fn criterion_7(sweep: &[Vec<RunSummary>]) -> Outcome {
    let fbcc = &sweep[0];
    let quality = fbcc.iter().all(|r| r.acc >= 0.90 && r.fgt <= 0.05);
    let slowest = fbcc.iter().map(|r| r.secs).fold(0.0, f64::max);
    let accs: Vec<String> = fbcc.iter().map(|r| format!("{:.3}", r.acc)).collect();
    let fgts: Vec<String> = fbcc.iter().map(|r| format!("{:+.3}", r.fgt)).collect();
    Outcome::new(
        quality && slowest < 600.0,
        format!(
            "per seed ACC-bar [{}] (need >= 0.90), F-bar [{}] (need <= 0.05); slowest seed {slowest:.1}s",
            accs.join(", "),
            fgts.join(", ")
        ),
    )
}

fn criterion_8(sweep: &[Vec<RunSummary>]) -> Outcome {
    let med_f: Vec<f64> = sweep.iter().map(|rs| median(rs.iter().map(|r| r.fgt).collect())).collect();
    let med_a: Vec<f64> = sweep.iter().map(|rs| median(rs.iter().map(|r| r.acc).collect())).collect();
    let ordering = med_f[0] <= med_f[1] && med_f[1] <= med_f[2];
    let acc_ok = med_a[1..].iter().all(|&a| med_a[0] >= a - 0.02);
    let parts: Vec<String> = Ablation::SWEEP
        .iter()
        .zip(med_f.iter().zip(&med_a))
        .map(|(a, (f, acc))| format!("{} F {f:+.3} ACC {acc:.3}", a.label()))
        .collect();
    Outcome::new(ordering && acc_ok, format!("medians: {}", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    let mut by_m = Vec::new();
    for m in [2usize, 5] {
        let fgts: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let r = run(&stream(10, seed), seed, m, Ablation::DEFAULT);
                println!("    10 tasks M={m} seed {seed}: ACC-bar {:.4}  F-bar {:+.4}  ({:.1}s)", r.acc, r.fgt, r.secs);
                r.fgt
            })
            .collect();
        by_m.push(median(fgts));
    }
    Outcome::new(
        by_m[1] <= by_m[0],
        format!("median F-bar M=2 {:+.4}, M=5 {:+.4}", by_m[0], by_m[1]),
    )
}

fn criterion_10() -> Outcome {
    let n = 5;
    let (p_first, p_last) = (0.1, 1.0);
    let p = imbalance_schedule(n, p_first, p_last).unwrap();
    let closed: Vec<f64> = (1..=n)
        .map(|t| p_first + (p_last - p_first) * (t - 1) as f64 / (n - 1) as f64)
        .collect();
    let published = [0.1, 0.325, 0.55, 0.775, 1.0];
    let near = p.iter().zip(published).all(|(a, b)| (a - b).abs() < 1e-15);

    // reported only: FBCC against its no-distillation ablation on the
    // imbalanced stream
    let ds = subsample_imbalanced(&stream(5, 0), p_first, p_last, 0).unwrap();
    for ablation in [Ablation::DEFAULT, Ablation::NO_KD] {
        let r = run(&ds, 0, 3, ablation);
        println!("    imbalanced {:<16}: ACC-bar {:.4}  F-bar {:+.4}", ablation.label(), r.acc, r.fgt);
    }
    Outcome::new(p == closed && near, format!("p = {p:?}"))
}

fn criterion_11() -> Outcome {
    let cfg = StreamConfig {
        clusters_per_task: vec![2, 3],
        samples_per_cluster: 60,
        ..StreamConfig::default()
    };
    let (_, ds) = generate_stream(&cfg, 111).unwrap();
    let train = TrainConfig {
        epochs: 4,
        seed: 111,
        ..TrainConfig::default()
    };
    let a = run_stream(&train, &ds).unwrap().report.to_json().unwrap();
    let b = run_stream(&train, &ds).unwrap().report.to_json().unwrap();
    Outcome::new(a.as_bytes() == b.as_bytes(), format!("two reports of {} bytes", a.len()))
}

fn criterion_12() -> Outcome {
    let same = DistillationRecord {
        teacher_acc: vec![0.9, 0.8, 0.7],
        student_acc: vec![0.9, 0.8, 0.7],
        param_count_student: 500,
        param_count_teacher: 500,
        alpha: 0.5,
    };
    let ds_same = distillation_score(&same).unwrap().score;
    let sized = DistillationRecord {
        student_acc: vec![0.3, 0.2, 0.6],
        param_count_student: 3,
        param_count_teacher: 7,
        alpha: 1.0,
        ..same.clone()
    };
    let ds_sized = distillation_score(&sized).unwrap().score;
    Outcome::new(
        ds_same == 0.5 && ds_sized == 3.0 / 7.0,
        format!("identical networks DS {ds_same}; alpha 1 DS {ds_sized} vs ratio {}", 3.0 / 7.0),
    )
}

fn main() -> ExitCode {
    let mut failed_hard = Vec::new();
    let mut passed = 0;
    let mut report = |id: usize, name: &str, soft: bool, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag}: {name}: {}", o.detail);
        if o.pass {
            passed += 1;
        } else if !soft {
            failed_hard.push(id);
        }
    };

    report(1, "loss gradients match finite differences", false, criterion_1());
    report(2, "hand-computed loss values", false, criterion_2());
    report(3, "entropy bound", false, criterion_3());
    report(4, "assignment matches brute force", false, criterion_4());
    report(5, "forgetting hand case", false, criterion_5());
    report(6, "freeze and detach discipline", false, criterion_6());
    println!("  running the 5-task ablation sweep ({} seeds)", SEEDS.len());
    let sweep = ablation_sweep();
    report(7, "end-to-end quality on the 5-task stream", true, criterion_7(&sweep));
    report(8, "ablation ordering", true, criterion_8(&sweep));
    println!("  running the 10-task pool-size sweep");
    report(9, "larger student pool forgets no more", true, criterion_9());
    report(10, "imbalanced sampling schedule", false, criterion_10());
    report(11, "byte-identical reports", false, criterion_11());
    report(12, "distillation score endpoints", false, criterion_12());

    println!("{passed}/12 criteria passed");
    if failed_hard.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("correctness criteria failed: {failed_hard:?}");
        ExitCode::FAILURE
    }
}
