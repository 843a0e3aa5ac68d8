//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the output.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use vlaguard_cli::config::ExperimentConfig;
use vlaguard_cli::experiment::{
    alarm_rate, detection_study, evaluate_selection, fresh_expert_states, generate, train_calibrate, Artifacts,
};
use vlaguard_core::conformal::ConformalCalibration;
use vlaguard_core::metrics::{
    cohens_d_from_a12, evaluate, roc_auc, spearman_rho, vargha_delaney_a12, OutcomeScore,
};
use vlaguard_core::quantile::{train, QuantileModel, TargetKind, TrainConfig};
use vlaguard_core::selector::SelectionStrategy;
use vlaguard_core::smd::{tune_threshold_youden, Detector, DetectorArtifact, GaussianStateModel, ThresholdPool};
use vlaguard_core::{ActionVector, LatentEmbedding, Outcome, RegressionSample, StateVector, STATE_DIM};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn reference_artifacts() -> Artifacts {
    let cfg = ExperimentConfig::default();
    let (data, manifest) = generate(&cfg).expect("dataset");
    train_calibrate(&cfg, &data, &manifest).expect("training").0
}

// 1 ---------------------------------------------------------------------

fn conformal_coverage() -> Check {
    let mut notes = Vec::new();
    for seed in 0..10 {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let start = Instant::now();
        let (data, manifest) = generate(&cfg).map_err(|e| e.to_string())?;
        let (_, summary) = train_calibrate(&cfg, &data, &manifest).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        ensure(summary.n_calib >= 500, format!("seed {seed}: n_cal {}", summary.n_calib))?;
        ensure(
            (0.87..=1.0).contains(&summary.heldout_coverage),
            format!("seed {seed}: coverage {:.4}", summary.heldout_coverage),
        )?;
        ensure(secs < 60.0, format!("seed {seed}: {secs:.1} s"))?;
        notes.push(format!("{:.3}", summary.heldout_coverage));
    }
    Ok(format!("coverage per seed [{}]", notes.join(", ")))
}

// 2 ---------------------------------------------------------------------

fn gaussian_sample(rng: &mut ChaCha8Rng, dim: usize) -> RegressionSample {
    RegressionSample {
        embedding: LatentEmbedding((0..dim).map(|_| rng.sample(StandardNormal)).collect()),
        predicted_action: ActionVector(std::array::from_fn(|_| rng.sample(StandardNormal))),
        expert_action: ActionVector(std::array::from_fn(|_| rng.sample(StandardNormal))),
    }
}

fn quantile_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let samples: Vec<_> = (0..5000).map(|_| gaussian_sample(&mut rng, 4)).collect();
    let config = TrainConfig { hidden_sizes: vec![8], epochs: 20, seed: 1, ..TrainConfig::default() };
    let model = train(&samples, &[0.9], TargetKind::ActionInterval, &config).map_err(|e| e.to_string())?;
    let probe = gaussian_sample(&mut rng, 4);
    let pred = model.predict(&probe.embedding, &probe.predicted_action).map_err(|e| e.to_string())?;
    let worst = pred[0].iter().map(|q| (q - 1.2816).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.05, format!("0.9-quantile off by {worst:.4}"))?;

    let small: Vec<_> = (0..10).map(|_| gaussian_sample(&mut rng, 3)).collect();
    let base = QuantileModel::zeros(3 + 7, vec![0.9], TargetKind::Distance7, &[5]).map_err(|e| e.to_string())?;
    let params: Vec<f64> = (0..base.parameter_count()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let model = base.with_parameters(params.clone()).map_err(|e| e.to_string())?;
    for s in &small {
        let y = TargetKind::Distance7.target(s).unwrap()[0];
        let p = model.predict_at(0.9, &s.embedding, &s.predicted_action).unwrap();
        ensure((y - p).abs() > 1e-3, "sample too close to the kink".into())?;
    }
    let (_, grad) = model.loss_gradient(&small).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for k in 0..params.len() {
        let loss_at = |delta: f64| {
            let mut p = params.clone();
            p[k] += delta;
            model.clone().with_parameters(p).unwrap().batch_loss(&small).unwrap()
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        worst_rel = worst_rel.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
    }
    ensure(worst_rel < 1e-4, format!("gradient relative error {worst_rel:.2e}"))?;
    Ok(format!("max quantile error {worst:.4}, max gradient relative error {worst_rel:.1e}"))
}

// 3 ---------------------------------------------------------------------

fn selection_ordering(artifacts: &Artifacts) -> Check {
    let cfg = ExperimentConfig::default();
    let report = evaluate_selection(&cfg, artifacts, 200).map_err(|e| e.to_string())?;
    let rate = |s| report.row(s).success_rate;
    let se = |s| report.row(s).std_error;
    let gap_se = |a, b| 2.0 * (se(a) * se(a) + se(b) * se(b)).sqrt();
    use SelectionStrategy::*;
    let line = format!(
        "CQR {:.3}, Mean {:.3}, Random {:.3}, Default {:.3}",
        rate(Cqr),
        rate(Mean),
        rate(Random),
        rate(Default)
    );
    ensure(rate(Cqr) - rate(Mean) > gap_se(Cqr, Mean), format!("CQR vs Mean gap too small: {line}"))?;
    for base in [Random, Default] {
        ensure(rate(Mean) - rate(base) > gap_se(Mean, base), format!("Mean vs {} gap too small: {line}", base.name()))?;
    }
    ensure((rate(Random) - rate(Default)).abs() <= gap_se(Random, Default), format!("Random and Default differ: {line}"))?;
    Ok(line)
}

// 4 ---------------------------------------------------------------------

type Mat = [[f64; STATE_DIM]; STATE_DIM];

fn mat_vec(a: &Mat, x: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    std::array::from_fn(|i| (0..STATE_DIM).map(|j| a[i][j] * x[j]).sum())
}

fn random_mat(rng: &mut ChaCha8Rng) -> Mat {
    std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}

fn gauss_jordan_inverse(mut a: Mat) -> Mat {
    let mut inv: Mat = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }));
    for c in 0..STATE_DIM {
        let p = (c..STATE_DIM).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..STATE_DIM {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in (0..STATE_DIM).filter(|&i| i != c) {
            let f = a[i][c];
            for j in 0..STATE_DIM {
                a[i][j] -= f * a[c][j];
                inv[i][j] -= f * inv[c][j];
            }
        }
    }
    inv
}

fn smd_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mean: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let mut cov = vec![0.0; STATE_DIM * STATE_DIM];
    (0..STATE_DIM).for_each(|i| cov[i * STATE_DIM + i] = 1.0);
    let art = DetectorArtifact {
        mean,
        covariance: cov,
        ridge: 0.0,
        sample_count: 2,
        threshold: 1.0,
        quantile_level: 0.99,
        threshold_source: Default::default(),
    };
    let identity = Detector::from_artifact(&art).map_err(|e| e.to_string())?;
    let mut worst_euclid: f64 = 0.0;
    for _ in 0..1000 {
        let s: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let e = s.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst_euclid = worst_euclid.max((identity.distance(&StateVector(s)).unwrap() - e).abs());
    }
    ensure(worst_euclid <= 1e-12, format!("identity reduction error {worst_euclid:.2e}"))?;

    let mix = random_mat(&mut rng);
    let states: Vec<StateVector> = (0..500)
        .map(|_| StateVector(mat_vec(&mix, &std::array::from_fn(|_| rng.sample(StandardNormal)))))
        .collect();
    let a = random_mat(&mut rng);
    let b: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    let map = |s: &StateVector| {
        let x = mat_vec(&a, &s.0);
        StateVector(std::array::from_fn(|i| x[i] + b[i]))
    };
    let m1 = GaussianStateModel::fit(&states, Some(0.0)).map_err(|e| e.to_string())?;
    let m2 = GaussianStateModel::fit(&states.iter().map(map).collect::<Vec<_>>(), Some(0.0)).map_err(|e| e.to_string())?;
    let mut worst_affine: f64 = 0.0;
    for _ in 0..1000 {
        let q = StateVector(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
        worst_affine = worst_affine.max((m1.mahalanobis(&q).unwrap() - m2.mahalanobis(&map(&q)).unwrap()).abs());
    }
    ensure(worst_affine <= 1e-8, format!("affine invariance error {worst_affine:.2e}"))?;

    let model = GaussianStateModel::fit(&states, None).map_err(|e| e.to_string())?;
    let mut reg = model.covariance();
    (0..STATE_DIM).for_each(|i| reg[i][i] += model.ridge());
    let precision = gauss_jordan_inverse(reg);
    let mu = model.mean();
    let mut worst_rel: f64 = 0.0;
    for _ in 0..1000 {
        let q: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let d: [f64; STATE_DIM] = std::array::from_fn(|i| q[i] - mu[i]);
        let oracle = d.iter().zip(&mat_vec(&precision, &d)).map(|(x, y)| x * y).sum::<f64>().sqrt();
        worst_rel = worst_rel.max((model.mahalanobis(&StateVector(q)).unwrap() - oracle).abs() / oracle);
    }
    ensure(worst_rel <= 1e-8, format!("dense inverse relative error {worst_rel:.2e}"))?;
    Ok(format!(
        "identity {worst_euclid:.1e}, affine {worst_affine:.1e}, dense inverse {worst_rel:.1e}"
    ))
}

// 5 ---------------------------------------------------------------------

fn smd_detection(artifacts: &Artifacts) -> Check {
    let cfg = ExperimentConfig::default();
    let study = detection_study(&cfg, artifacts).map_err(|e| e.to_string())?;
    ensure(study.auc >= 0.9, format!("max-SMD AUC {:.4}", study.auc))?;
    let states = fresh_expert_states(&cfg, 200).map_err(|e| e.to_string())?;
    let rate = alarm_rate(&artifacts.detector, &states).map_err(|e| e.to_string())?;
    ensure(rate <= 0.02, format!("flags {:.4} of fresh in-distribution states", rate))?;
    Ok(format!(
        "AUC {:.3} over {}+{} episodes, false alarms {:.4} of {} fresh states",
        study.auc,
        study.n_clean,
        study.n_drifted,
        rate,
        states.len()
    ))
}

// 6 ---------------------------------------------------------------------

fn j_at(runs: &[(f64, Outcome)], t: f64, penalty: f64) -> f64 {
    let pos: Vec<f64> = runs.iter().filter(|r| r.1 == Outcome::Failure).map(|r| r.0).collect();
    let neg: Vec<f64> = runs.iter().filter(|r| r.1 == Outcome::Success).map(|r| r.0).collect();
    let tpr = pos.iter().filter(|&&d| d > t).count() as f64 / pos.len() as f64;
    let fpr = neg.iter().filter(|&&d| d > t).count() as f64 / neg.len() as f64;
    tpr - penalty * fpr
}

fn youden_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst: f64 = 0.0;
    for set in 0..50 {
        let n = rng.random_range(4..=200);
        let shift: f64 = rng.random_range(0.0..2.0);
        let mut runs: Vec<(f64, Outcome)> = (0..n)
            .map(|_| {
                let fail = rng.random_bool(0.4);
                // coarse values so ties occur
                let d = (rng.sample::<f64, _>(StandardNormal) + if fail { shift } else { 0.0 }) * 4.0;
                (d.round() / 4.0, if fail { Outcome::Failure } else { Outcome::Success })
            })
            .collect();
        runs[0].1 = Outcome::Failure;
        runs[1].1 = Outcome::Success;
        let ns = runs.iter().filter(|r| r.1 == Outcome::Success).count();
        // one grid level per order statistic of the success pool
        let grid: Vec<f64> = (1..=ns).map(|k| (k as f64 - 0.5) / ns as f64).collect();
        let got = tune_threshold_youden(&runs, &grid, 2.0, ThresholdPool::SuccessOnly).map_err(|e| e.to_string())?;

        let mut pool: Vec<f64> = runs.iter().filter(|r| r.1 == Outcome::Success).map(|r| r.0).collect();
        pool.sort_by(f64::total_cmp);
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for &t in &pool {
            let j = j_at(&runs, t, 2.0);
            // ties favour the larger threshold (the higher confidence level)
            if j >= best.0 {
                best = (j, t);
            }
        }
        ensure(
            got.j_score == best.0 && got.threshold == best.1,
            format!("set {set}: got (J {}, t {}) oracle (J {}, t {})", got.j_score, got.threshold, best.0, best.1),
        )?;
        let recomputed = j_at(&runs, got.threshold, 2.0);
        let direct = got.tpr - 2.0 * got.fpr;
        worst = worst.max((recomputed - got.j_score).abs()).max((direct - got.j_score).abs());
        ensure(worst <= 1e-12, format!("set {set}: J recomputation differs by {worst:.2e}"))?;
    }
    Ok(format!("50 sets match the enumeration oracle, J recomputed within {worst:.1e}"))
}

// 7 ---------------------------------------------------------------------

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_auc: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let mut pairs: Vec<OutcomeScore> = (0..n)
            .map(|_| {
                let o = if rng.random_bool(0.5) { Outcome::Failure } else { Outcome::Success };
                OutcomeScore::new(f64::from(rng.random_range(0..8u8)), o)
            })
            .collect();
        pairs[0].outcome = Outcome::Failure;
        pairs[1].outcome = Outcome::Success;
        let f: Vec<f64> = pairs.iter().filter(|p| p.outcome == Outcome::Failure).map(|p| p.score).collect();
        let s: Vec<f64> = pairs.iter().filter(|p| p.outcome == Outcome::Success).map(|p| p.score).collect();
        let a12 = vargha_delaney_a12(&f, &s).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((roc_auc(&pairs).unwrap() - a12).abs());
        let d = cohens_d_from_a12(a12).unwrap();
        ensure(d == 2.0 * (a12 - 0.5).abs(), format!("d {d} for A12 {a12}"))?;
        let report = evaluate("m", &pairs).unwrap();
        ensure(report.cohens_d == 2.0 * (report.a12_failure_exceeds - 0.5).abs(), "report d".into())?;
    }
    ensure(worst_auc <= 1e-12, format!("AUC vs A12 difference {worst_auc:.2e}"))?;

    // scores a strictly monotone function of the outcome
    let mono: Vec<OutcomeScore> = (0..40)
        .map(|i| {
            let o = if i % 3 == 0 { Outcome::Failure } else { Outcome::Success };
            OutcomeScore::new(if o == Outcome::Failure { 2.5 } else { -1.0 }, o)
        })
        .collect();
    let rho = spearman_rho(&mono).unwrap();
    ensure((rho.abs() - 1.0).abs() <= 1e-12, format!("|rho| {rho} on monotone data"))?;

    let null: Vec<OutcomeScore> = (0..10_000)
        .map(|_| {
            let o = if rng.random_bool(0.5) { Outcome::Failure } else { Outcome::Success };
            OutcomeScore::new(rng.random(), o)
        })
        .collect();
    let auc = roc_auc(&null).unwrap();
    let rho_null = spearman_rho(&null).unwrap();
    ensure((auc - 0.5).abs() <= 0.02, format!("null AUC {auc:.4}"))?;
    ensure(rho_null.abs() < 0.05, format!("null |rho| {:.4}", rho_null.abs()))?;
    Ok(format!("AUC = A12 within {worst_auc:.1e}, null AUC {auc:.3}, null |rho| {:.3}", rho_null.abs()))
}

// 8 ---------------------------------------------------------------------

fn run_cli(config: &Path, dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_vlaguard");
    let d = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let verbs: Vec<Vec<String>> = vec![
        vec!["generate".into(), "--out".into(), d("data")],
        vec!["train-calibrate".into(), "--data".into(), d("data"), "--out".into(), d("artifacts")],
        vec!["eval-selection".into(), "--artifacts".into(), d("artifacts"), "--out".into(), d("reports")],
        vec!["tune-threshold".into(), "--data".into(), d("data"), "--artifacts".into(), d("artifacts")],
        vec!["report".into(), "--data".into(), d("data"), "--artifacts".into(), d("artifacts"), "--out".into(), d("reports")],
        vec![
            "monitor-replay".into(),
            "--trajectories".into(),
            d("data/trajectories.jsonl"),
            "--detector".into(),
            d("artifacts/detector.json"),
            "--out".into(),
            d("replay/annotated.jsonl"),
        ],
    ];
    for args in verbs {
        let out = Command::new(bin).arg("--config").arg(config).args(&args).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))?;
    }
    Ok(())
}

fn checksums(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), hex));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_round_trip(artifacts: &Artifacts) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("small.toml");
    std::fs::write(
        &config,
        "n_episodes = 60\nn_trials = 10\n[train]\nepochs = 3\n[ood]\nn_clean = 10\nn_drifted = 10\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&config, &a)?;
    run_cli(&config, &b)?;
    let (ca, cb) = (checksums(&a), checksums(&b));
    ensure(ca.len() >= 15, format!("only {} artifacts produced", ca.len()))?;
    ensure(ca == cb, "artifact checksums differ between identical runs".into())?;

    let model = QuantileModel::from_json(&artifacts.model.to_json().unwrap()).map_err(|e| e.to_string())?;
    let same_bits = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(same_bits(&model.parameters, &artifacts.model.parameters) && model == artifacts.model, "model".into())?;
    let cal = ConformalCalibration::from_json(&artifacts.calibration.to_json().unwrap()).map_err(|e| e.to_string())?;
    ensure(cal.offset.to_bits() == artifacts.calibration.offset.to_bits() && cal == artifacts.calibration, "calibration".into())?;
    let det = Detector::from_json(&artifacts.detector.to_json().unwrap()).map_err(|e| e.to_string())?;
    let (x, y) = (det.to_artifact(), artifacts.detector.to_artifact());
    ensure(
        same_bits(&x.covariance, &y.covariance) && same_bits(&x.mean, &y.mean) && x == y,
        "detector".into(),
    )?;
    Ok(format!("{} files checksum-identical across reruns; JSON artifacts bit-exact", ca.len()))
}

fn main() {
    let started = Instant::now();
    let artifacts = reference_artifacts();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("conformal coverage", Box::new(conformal_coverage)),
        ("quantile oracle", Box::new(quantile_oracle)),
        ("selection ordering", Box::new(|| selection_ordering(&artifacts))),
        ("SMD correctness", Box::new(smd_correctness)),
        ("SMD detection", Box::new(|| smd_detection(&artifacts))),
        ("Youden oracle", Box::new(youden_oracle)),
        ("metric identities", Box::new(metric_identities)),
        ("determinism and round-trip", Box::new(|| determinism_and_round_trip(&artifacts))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} passed in {:.1} s", criteria.len() - failed, criteria.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
