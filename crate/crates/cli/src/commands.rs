//! One function per CLI verb: read inputs from disk, run the pipeline step,
//! write artifacts.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vlaguard_core::conformal::ConformalCalibration;
use vlaguard_core::quantile::QuantileModel;
use vlaguard_core::records::{
    read_jsonl, write_jsonl, ExpertStateRecord, RegressionRecord, TrajectoryRecord,
};
use vlaguard_core::simenv::Dataset;
use vlaguard_core::smd::{Detector, Verdict};

use crate::config::ExperimentConfig;
use crate::experiment::{
    detection_study, evaluate_selection, failure_prediction, train_calibrate, tune_threshold, Artifacts,
    SplitManifest,
};

pub const REGRESSION_FILE: &str = "regression.jsonl";
pub const EXPERT_FILE: &str = "expert_states.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DETECTOR_FILE: &str = "detector.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const YOUDEN_FILE: &str = "youden.json";
pub const YOUDEN_DETECTOR_FILE: &str = "detector_youden.json";
pub const YOUDEN_CURVE_FILE: &str = "youden_curve.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_jsonl(BufWriter::new(file), records).with_context(|| format!("writing {}", path.display()))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

/// `generate`: dataset files plus the split manifest.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, manifest) = crate::experiment::generate(cfg)?;
    create_dir(out)?;
    let regression: Vec<RegressionRecord> = data.samples.iter().map(Into::into).collect();
    let experts: Vec<ExpertStateRecord> = data.expert_states.iter().map(Into::into).collect();
    let trajectories: Vec<TrajectoryRecord> = data.trajectories.iter().map(Into::into).collect();
    let paths = [REGRESSION_FILE, EXPERT_FILE, TRAJECTORY_FILE, SPLIT_FILE].map(|f| out.join(f));
    write_records(&paths[0], &regression)?;
    write_records(&paths[1], &experts)?;
    write_records(&paths[2], &trajectories)?;
    write_json(&paths[3], &manifest)?;
    Ok(paths.to_vec())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, SplitManifest)> {
    let regression: Vec<RegressionRecord> = read_records(&dir.join(REGRESSION_FILE))?;
    let experts: Vec<ExpertStateRecord> = read_records(&dir.join(EXPERT_FILE))?;
    let manifest = read_json(&dir.join(SPLIT_FILE))?;
    let data = Dataset {
        samples: regression.into_iter().map(Into::into).collect(),
        expert_states: experts.into_iter().map(Into::into).collect(),
        trajectories: Vec::new(),
    };
    Ok((data, manifest))
}

/// `train-calibrate`: model, calibration, detector and a summary.
pub fn train_calibrate_cmd(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, manifest) = load_dataset(data_dir)?;
    let (artifacts, summary) = train_calibrate(cfg, &data, &manifest)?;
    create_dir(out)?;
    let paths = [MODEL_FILE, CALIBRATION_FILE, DETECTOR_FILE, TRAIN_SUMMARY_FILE].map(|f| out.join(f));
    write_text(&paths[0], &(artifacts.model.to_json()? + "\n"))?;
    write_text(&paths[1], &(artifacts.calibration.to_json()? + "\n"))?;
    write_text(&paths[2], &(artifacts.detector.to_json()? + "\n"))?;
    write_json(&paths[3], &summary)?;
    println!(
        "held-out coverage {:.3} at target {:.3} over {} eval samples",
        summary.heldout_coverage,
        1.0 - cfg.miscoverage,
        summary.n_eval
    );
    Ok(paths.to_vec())
}

pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let path = dir.join(MODEL_FILE);
    let model = QuantileModel::from_json(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let path = dir.join(CALIBRATION_FILE);
    let calibration = ConformalCalibration::from_json(&read_text(&path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let detector = load_detector(&dir.join(DETECTOR_FILE))?;
    Ok(Artifacts { model, calibration, detector })
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    Detector::from_json(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// `eval-selection`: per-strategy success rates as JSON and a text table.
pub fn eval_selection_cmd(cfg: &ExperimentConfig, artifact_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let artifacts = load_artifacts(artifact_dir)?;
    let report = evaluate_selection(cfg, &artifacts, cfg.n_trials)?;
    create_dir(out)?;
    let paths = ["selection.json", "selection.txt"].map(|f| out.join(f));
    write_json(&paths[0], &report)?;
    write_text(&paths[1], &report.render())?;
    Ok(paths.to_vec())
}

/// `tune-threshold`: Youden sweep over calibration-split trajectories, the
/// curve as CSV, and a detector carrying the chosen threshold.
pub fn tune_threshold_cmd(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    artifact_dir: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let detector = load_detector(&artifact_dir.join(DETECTOR_FILE))?;
    let trajectories: Vec<TrajectoryRecord> = read_records(&data_dir.join(TRAJECTORY_FILE))?;
    let manifest: SplitManifest = read_json(&data_dir.join(SPLIT_FILE))?;
    let result = tune_threshold(cfg, &detector, &trajectories, &manifest)?;
    let tuned = Detector::new(detector.model.clone(), result.safety_threshold());
    create_dir(out)?;
    let paths = [YOUDEN_FILE, YOUDEN_DETECTOR_FILE, YOUDEN_CURVE_FILE].map(|f| out.join(f));
    write_json(&paths[0], &result)?;
    write_text(&paths[1], &(tuned.to_json()? + "\n"))?;
    let mut csv = String::from("confidence,threshold,tpr,fpr,j_score\n");
    for p in &result.curve {
        csv += &format!("{},{},{},{},{}\n", p.confidence, p.threshold, p.tpr, p.fpr, p.j_score);
    }
    write_text(&paths[2], &csv)?;
    Ok(paths.to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReportFile {
    failure_prediction: crate::experiment::FailureReport,
    detection: crate::experiment::DetectionReport,
}

/// `report`: failure-prediction table on the evaluation split and the OOD
/// detection study.
pub fn report_cmd(cfg: &ExperimentConfig, data_dir: &Path, artifact_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let artifacts = load_artifacts(artifact_dir)?;
    let manifest: SplitManifest = read_json(&data_dir.join(SPLIT_FILE))?;
    let (failures, trajectories) = failure_prediction(cfg, &artifacts, &manifest.eval)?;
    let detection = detection_study(cfg, &artifacts)?;
    let text = format!(
        "Failure prediction over {} evaluation episodes\n\n{}\nOOD detection ({} clean, {} drifted): AUC {:.3}\n",
        failures.n_episodes,
        failures.render(),
        detection.n_clean,
        detection.n_drifted,
        detection.auc
    );
    create_dir(out)?;
    let paths = ["report.json", "report.txt", "eval_trajectories.jsonl"].map(|f| out.join(f));
    write_json(&paths[0], &ReportFile { failure_prediction: failures, detection })?;
    write_text(&paths[1], &text)?;
    write_records(&paths[2], &trajectories)?;
    Ok(paths.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    #[serde(flatten)]
    pub trajectory: TrajectoryRecord,
    pub verdicts: Vec<Verdict>,
    pub first_alarm: Option<usize>,
}

/// Replay trajectories through a detector. With `halt`, each trajectory is
/// cut after its first alarm, as an active monitor would have done.
pub fn replay(detector: &Detector, trajectories: Vec<TrajectoryRecord>, halt: bool) -> Result<Vec<ReplayRecord>> {
    let mut out = Vec::with_capacity(trajectories.len());
    for mut t in trajectories {
        let mut verdicts = Vec::with_capacity(t.steps.len());
        for s in &mut t.steps {
            s.smd = Some(detector.distance(&s.state)?);
            verdicts.push(detector.check(&s.state)?);
        }
        let first_alarm = verdicts.iter().position(|v| *v == Verdict::Unsafe);
        if let (true, Some(i)) = (halt, first_alarm) {
            t.steps.truncate(i + 1);
            verdicts.truncate(i + 1);
            t.halted = true;
        }
        out.push(ReplayRecord { trajectory: t, verdicts, first_alarm });
    }
    Ok(out)
}

/// `monitor-replay`: annotate a trajectory file with distances and verdicts.
pub fn monitor_replay_cmd(trajectories: &Path, detector: &Path, out: &Path, halt: bool) -> Result<Vec<PathBuf>> {
    let detector = load_detector(detector)?;
    let records = replay(&detector, read_records(trajectories)?, halt)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_records(out, &records)?;
    Ok(vec![out.to_path_buf()])
}
