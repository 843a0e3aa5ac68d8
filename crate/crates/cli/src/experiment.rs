//! Experiment pipeline: splitting, training and calibration, selection
//! trials, failure-prediction metrics and the OOD detection study.
//!
//! Everything runs sequentially in a fixed order, so equal configs give
//! byte-identical outputs.

use anyhow::{anyhow, bail, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vlaguard_core::conformal::{calibrate_at, empirical_coverage, ConformalCalibration};
use vlaguard_core::metrics::{evaluate, render_table, Aggregation, MetricsReport, OutcomeScore};
use vlaguard_core::quantile::{pinball_loss, train, QuantileModel};
use vlaguard_core::records::TrajectoryRecord;
use vlaguard_core::selector::SelectionStrategy;
use vlaguard_core::simenv::{
    generate_dataset, rollout, Dataset, KeyedState, MonitorHook, PolicyHandle, PolicyMode, Scorer,
};
use vlaguard_core::smd::{
    confidence_grid, fit_threshold, tune_threshold_youden, Detector, GaussianStateModel, Verdict,
    YoudenResult,
};
use vlaguard_core::{Error, Outcome, RegressionSample, StateVector, Trajectory};

use crate::config::ExperimentConfig;

/// Independent families of episode seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Dataset = 0,
    Trials = 1,
    Clean = 2,
    Drifted = 3,
    Fresh = 4,
}

/// `n` episode seeds, readable as `master * 10^7 + stream * 10^6 + i`.
pub fn episode_seeds(master: u64, stream: SeedStream, n: usize) -> Vec<u64> {
    assert!(n <= 1_000_000, "at most 10^6 episodes per stream");
    let base = master.wrapping_mul(10_000_000).wrapping_add(stream as u64 * 1_000_000);
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Episode-level train / calibration / evaluation assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<u64>,
    pub calib: Vec<u64>,
    pub eval: Vec<u64>,
}

impl SplitManifest {
    pub fn new(cfg: &ExperimentConfig, episodes: &[u64]) -> Result<Self> {
        let mut order = episodes.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n = order.len() as f64;
        let n_train = (cfg.splits.train_frac * n).round() as usize;
        let n_calib = (cfg.splits.calib_frac * n).round() as usize;
        if n_train == 0 || n_calib == 0 || n_train + n_calib >= order.len() {
            bail!("{} episodes cannot fill all three splits", order.len());
        }
        let eval = order.split_off(n_train + n_calib);
        let calib = order.split_off(n_train);
        let (mut train, mut calib, mut eval) = (order, calib, eval);
        train.sort_unstable();
        calib.sort_unstable();
        eval.sort_unstable();
        Ok(Self { seed: cfg.seed, train, calib, eval })
    }

    fn is_train(&self, e: u64) -> bool {
        self.train.binary_search(&e).is_ok()
    }

    fn is_calib(&self, e: u64) -> bool {
        self.calib.binary_search(&e).is_ok()
    }

    fn is_eval(&self, e: u64) -> bool {
        self.eval.binary_search(&e).is_ok()
    }
}

/// Generate the dataset and its split.
pub fn generate(cfg: &ExperimentConfig) -> Result<(Dataset, SplitManifest)> {
    let seeds = episode_seeds(cfg.seed, SeedStream::Dataset, cfg.n_episodes);
    let data = generate_dataset(&cfg.env(), &seeds)?;
    let manifest = SplitManifest::new(cfg, &seeds)?;
    Ok((data, manifest))
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub model: QuantileModel,
    pub calibration: ConformalCalibration,
    pub detector: Detector,
}

impl Artifacts {
    pub fn scorer(&self) -> Scorer<'_> {
        Scorer { model: &self.model, calibration: &self.calibration }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_train: usize,
    pub n_calib: usize,
    pub n_eval: usize,
    pub heldout_loss: f64,
    /// Held-out loss of the empirical training quantile used as a constant.
    pub constant_loss: f64,
    pub learnability_margin: f64,
    pub offset: f64,
    pub heldout_coverage: f64,
    pub n_expert_states: usize,
    pub detector_threshold: f64,
}

fn samples_where(data: &Dataset, keep: impl Fn(u64) -> bool) -> Vec<RegressionSample> {
    data.samples.iter().filter(|k| keep(k.episode)).map(|k| k.sample.clone()).collect()
}

fn states_where(states: &[KeyedState], keep: impl Fn(u64) -> bool) -> Vec<StateVector> {
    states.iter().filter(|k| keep(k.episode)).map(|k| k.state).collect()
}

/// Nearest-rank empirical quantile.
fn empirical_quantile(values: &[f64], level: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Train on the train split, calibrate on the calibration split and fit
/// the state monitor on expert states of the same two splits.
pub fn train_calibrate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    manifest: &SplitManifest,
) -> Result<(Artifacts, TrainSummary)> {
    let train_set = samples_where(data, |e| manifest.is_train(e));
    let calib_set = samples_where(data, |e| manifest.is_calib(e));
    let eval_set = samples_where(data, |e| manifest.is_eval(e));
    if eval_set.is_empty() {
        bail!("the evaluation split holds no regression samples");
    }

    let model = train(&train_set, &cfg.levels, cfg.target, &cfg.train_config())?;
    let level = cfg.score_level();
    let calibration = calibrate_at(&model, level, &calib_set, cfg.miscoverage)?;

    let target = |s: &RegressionSample| cfg.target.target(s).map(|t| t[0]);
    let train_targets = train_set.iter().map(target).collect::<Result<Vec<_>, _>>()?;
    let constant = empirical_quantile(&train_targets, level);
    let (mut heldout_loss, mut constant_loss) = (0.0, 0.0);
    for s in &eval_set {
        let y = target(s)?;
        heldout_loss += pinball_loss(y - model.predict_at(level, &s.embedding, &s.predicted_action)?, level)?;
        constant_loss += pinball_loss(y - constant, level)?;
    }
    heldout_loss /= eval_set.len() as f64;
    constant_loss /= eval_set.len() as f64;
    let heldout_coverage = empirical_coverage(&model, &calibration, &eval_set)?;

    let fit_states = states_where(&data.expert_states, |e| manifest.is_train(e));
    let threshold_states = states_where(&data.expert_states, |e| manifest.is_calib(e));
    let gaussian = GaussianStateModel::fit(&fit_states, None)?;
    let distances = threshold_states.iter().map(|s| gaussian.mahalanobis(s)).collect::<Result<Vec<_>, _>>()?;
    let detector = Detector::new(gaussian, fit_threshold(&distances, cfg.gamma)?);

    let summary = TrainSummary {
        n_train: train_set.len(),
        n_calib: calib_set.len(),
        n_eval: eval_set.len(),
        heldout_loss,
        constant_loss,
        learnability_margin: 1.0 - heldout_loss / constant_loss,
        offset: calibration.offset,
        heldout_coverage,
        n_expert_states: fit_states.len(),
        detector_threshold: detector.threshold.value,
    };
    Ok((Artifacts { model, calibration, detector }, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: SelectionStrategy,
    pub successes: usize,
    pub success_rate: f64,
    /// Binomial standard error of `success_rate`.
    pub std_error: f64,
    pub delta_vs_default: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub n_trials: usize,
    pub rows: Vec<StrategyRow>,
}

impl SelectionReport {
    pub fn row(&self, strategy: SelectionStrategy) -> &StrategyRow {
        self.rows.iter().find(|r| r.strategy == strategy).expect("every strategy is evaluated")
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8} {:>8}\n", "Strategy", "Success", "SE", "Delta");
        for r in &self.rows {
            out += &format!(
                "{:<10} {:>8.3} {:>8.3} {:>+8.3}\n",
                r.strategy.name(),
                r.success_rate,
                r.std_error,
                r.delta_vs_default
            );
        }
        out
    }
}

/// `n_trials` rollouts per strategy on one shared seed set.
pub fn evaluate_selection(cfg: &ExperimentConfig, artifacts: &Artifacts, n_trials: usize) -> Result<SelectionReport> {
    if n_trials == 0 {
        bail!("n_trials must be at least 1");
    }
    let policy = PolicyHandle::new(cfg.env(), PolicyMode::Stochastic);
    let seeds = episode_seeds(cfg.seed, SeedStream::Trials, n_trials);
    let mut rows = Vec::new();
    for strategy in SelectionStrategy::ALL {
        let mut successes = 0;
        for &seed in &seeds {
            let traj = rollout(&policy, strategy, Some(artifacts.scorer()), None, seed)?;
            successes += usize::from(traj.outcome == Outcome::Success);
        }
        let p = successes as f64 / n_trials as f64;
        rows.push(StrategyRow {
            strategy,
            successes,
            success_rate: p,
            std_error: (p * (1.0 - p) / n_trials as f64).sqrt(),
            delta_vs_default: 0.0,
        });
    }
    let base = rows.iter().find(|r| r.strategy == SelectionStrategy::Default).map(|r| r.success_rate);
    for r in &mut rows {
        r.delta_vs_default = r.success_rate - base.unwrap_or(0.0);
    }
    Ok(SelectionReport { n_trials, rows })
}

fn max_smd(traj: &Trajectory) -> f64 {
    traj.steps.iter().filter_map(|s| s.smd_score).fold(f64::NEG_INFINITY, f64::max)
}

/// Per-episode maximum distance under `detector`, recomputed from states.
pub fn labeled_max_distances(detector: &Detector, trajectories: &[TrajectoryRecord]) -> Result<Vec<(f64, Outcome)>> {
    trajectories
        .iter()
        .map(|t| {
            let mut m = f64::NEG_INFINITY;
            for s in &t.steps {
                m = m.max(detector.distance(&s.state)?);
            }
            Ok((m, t.outcome))
        })
        .collect()
}

/// Youden-tuned threshold from the calibration-split trajectories.
pub fn tune_threshold(
    cfg: &ExperimentConfig,
    detector: &Detector,
    trajectories: &[TrajectoryRecord],
    manifest: &SplitManifest,
) -> Result<YoudenResult> {
    let calib: Vec<TrajectoryRecord> =
        trajectories.iter().filter(|t| manifest.is_calib(t.episode)).cloned().collect();
    let runs = labeled_max_distances(detector, &calib)?;
    let failures = runs.iter().filter(|r| r.1.is_failure()).count();
    if failures == 0 || failures == runs.len() {
        return Err(Error::Degenerate(format!(
            "{} calibration trajectories with {failures} failures; tuning needs both outcomes",
            runs.len()
        ))
        .into());
    }
    let grid = confidence_grid(cfg.youden.grid_lo, cfg.youden.grid_hi, cfg.youden.grid_points);
    Ok(tune_threshold_youden(&runs, &grid, cfg.fpr_penalty, cfg.youden.pool)?)
}

/// Failure-prediction table over monitored default-strategy rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub n_episodes: usize,
    pub rows: Vec<MetricsReport>,
}

impl FailureReport {
    pub fn render(&self) -> String {
        render_table(&self.rows)
    }
}

/// Roll out the default strategy on the evaluation seeds with the scorer
/// and monitor attached (no halting), then score each episode.
pub fn failure_prediction(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    seeds: &[u64],
) -> Result<(FailureReport, Vec<TrajectoryRecord>)> {
    let policy = PolicyHandle::new(cfg.env(), PolicyMode::Stochastic);
    let hook = MonitorHook { detector: &artifacts.detector, halt_on_unsafe: false };
    let mut records = Vec::with_capacity(seeds.len());
    let (mut cqr_mean, mut cqr_max, mut smd) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in seeds {
        let traj = rollout(&policy, SelectionStrategy::Default, Some(artifacts.scorer()), Some(hook), seed)?;
        let rec = TrajectoryRecord::from(&traj);
        let bounds = rec.uncertainties();
        let agg = |a: Aggregation| a.apply(&bounds).ok_or_else(|| anyhow!("episode {seed} has no scored steps"));
        cqr_mean.push(OutcomeScore::new(agg(Aggregation::Mean)?, traj.outcome));
        cqr_max.push(OutcomeScore::new(agg(Aggregation::Max)?, traj.outcome));
        smd.push(OutcomeScore::new(max_smd(&traj), traj.outcome));
        records.push(rec);
    }
    let rows = vec![evaluate("CQR (mean)", &cqr_mean)?, evaluate("CQR (max)", &cqr_max)?, evaluate("SMD (max)", &smd)?];
    Ok((FailureReport { n_episodes: seeds.len(), rows }, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub strategy: SelectionStrategy,
    pub n_clean: usize,
    pub n_drifted: usize,
    pub clean_failures: usize,
    pub drifted_failures: usize,
    /// Episodes with at least one alarm at the detector threshold.
    pub clean_alarms: usize,
    pub drifted_alarms: usize,
    /// Probability that a drifted episode's max distance exceeds a clean one's.
    pub auc: f64,
}

/// Clean versus drifted episodes under CQR selection with a passive monitor.
pub fn detection_study(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<DetectionReport> {
    let clean_env = cfg.env();
    let drift_env = clean_env.with_drift(cfg.ood.drift, cfg.ood.onset_step);
    let hook = MonitorHook { detector: &artifacts.detector, halt_on_unsafe: false };
    let strategy = SelectionStrategy::Cqr;
    let mut pairs = Vec::new();
    let mut counts = [[0usize; 2]; 2];
    for (idx, env, stream, n) in [
        (0, clean_env, SeedStream::Clean, cfg.ood.n_clean),
        (1, drift_env, SeedStream::Drifted, cfg.ood.n_drifted),
    ] {
        let policy = PolicyHandle::new(env, PolicyMode::Stochastic);
        for seed in episode_seeds(cfg.seed, stream, n) {
            let traj = rollout(&policy, strategy, Some(artifacts.scorer()), Some(hook), seed)?;
            counts[idx][0] += usize::from(traj.outcome == Outcome::Failure);
            counts[idx][1] += usize::from(max_smd(&traj) > artifacts.detector.threshold.value);
            // drifted episodes play the role of the positive class
            let label = if idx == 1 { Outcome::Failure } else { Outcome::Success };
            pairs.push(OutcomeScore::new(max_smd(&traj), label));
        }
    }
    Ok(DetectionReport {
        strategy,
        n_clean: cfg.ood.n_clean,
        n_drifted: cfg.ood.n_drifted,
        clean_failures: counts[0][0],
        drifted_failures: counts[1][0],
        clean_alarms: counts[0][1],
        drifted_alarms: counts[1][1],
        auc: vlaguard_core::metrics::roc_auc(&pairs)?,
    })
}

/// Expert states from `n` episodes never used for fitting.
pub fn fresh_expert_states(cfg: &ExperimentConfig, n: usize) -> Result<Vec<StateVector>> {
    let policy = PolicyHandle::new(cfg.env(), PolicyMode::Expert);
    let mut states = Vec::new();
    for seed in episode_seeds(cfg.seed, SeedStream::Fresh, n) {
        let traj = rollout(&policy, SelectionStrategy::Default, None, None, seed)?;
        states.extend(traj.steps.iter().map(|s| s.state));
    }
    Ok(states)
}

/// Fraction of `states` the detector calls unsafe.
pub fn alarm_rate(detector: &Detector, states: &[StateVector]) -> Result<f64> {
    if states.is_empty() {
        bail!("no states to check");
    }
    let mut n = 0usize;
    for s in states {
        n += usize::from(detector.check(s)? == Verdict::Unsafe);
    }
    Ok(n as f64 / states.len() as f64)
}
