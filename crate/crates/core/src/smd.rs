//! State-level failure detection with the Mahalanobis distance to a
//! Gaussian fit of expert states.
//!
//! The covariance uses the unbiased `1/(N-1)` normalization. Distances are
//! evaluated through the Cholesky factor of `Sigma + lambda I`, so no explicit
//! inverse is ever formed.

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::types::{Outcome, StateVector, STATE_DIM};

type Mat8 = SMatrix<f64, STATE_DIM, STATE_DIM>;
type Vec8 = SVector<f64, STATE_DIM>;

#[derive(Debug, Clone)]
pub struct GaussianStateModel {
    mean: Vec8,
    covariance: Mat8,
    /// Lower Cholesky factor of `covariance + ridge * I`.
    factor: Mat8,
    ridge: f64,
    sample_count: usize,
}

/// Ridge applied when none is given: `1e-6 * trace(Sigma) / 8`.
pub fn default_ridge(covariance: &[[f64; STATE_DIM]; STATE_DIM]) -> f64 {
    let trace: f64 = (0..STATE_DIM).map(|i| covariance[i][i]).sum();
    1e-6 * trace / STATE_DIM as f64
}

fn sample_moments(states: &[StateVector]) -> (Vec8, Mat8) {
    let n = states.len() as f64;
    let mut mean = Vec8::zeros();
    for s in states {
        mean += Vec8::from_column_slice(s.as_slice());
    }
    mean /= n;
    let mut cov = Mat8::zeros();
    for s in states {
        let d = Vec8::from_column_slice(s.as_slice()) - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

impl GaussianStateModel {
    /// Fit mean and unbiased covariance; `ridge = None` uses [`default_ridge`].
    pub fn fit(states: &[StateVector], ridge: Option<f64>) -> Result<Self> {
        if states.len() < 2 {
            return Err(invalid_input("at least two states are needed to fit a covariance"));
        }
        if states.iter().any(|s| !s.is_finite()) {
            return Err(invalid_input("expert states must be finite"));
        }
        let (mean, covariance) = sample_moments(states);
        let ridge = match ridge {
            Some(r) => r,
            None => default_ridge(&to_rows(&covariance)),
        };
        Self::from_parts(mean, covariance, ridge, states.len())
    }

    fn from_parts(mean: Vec8, covariance: Mat8, ridge: f64, sample_count: usize) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(invalid_config(format!("ridge {ridge} must be a non-negative number")));
        }
        if sample_count < 2 {
            return Err(invalid_config("sample_count must be at least 2"));
        }
        if (covariance - covariance.transpose()).abs().max() > 1e-10 {
            return Err(invalid_config("covariance is not symmetric"));
        }
        let regularized = covariance + Mat8::identity() * ridge;
        let chol = Cholesky::new(regularized).ok_or(Error::SingularCovariance { ridge })?;
        let factor = chol.l();
        // Cholesky accepts some numerically semidefinite inputs; a vanishing
        // pivot would make distances meaningless.
        let max_diag = regularized.diagonal().max();
        if (0..STATE_DIM).any(|i| factor[(i, i)] <= 1e-12 * max_diag.max(1.0).sqrt()) {
            return Err(Error::SingularCovariance { ridge });
        }
        Ok(Self { mean, covariance, factor, ridge, sample_count })
    }

    pub fn mean(&self) -> [f64; STATE_DIM] {
        self.mean.into()
    }

    /// Unregularized covariance, row by row.
    pub fn covariance(&self) -> [[f64; STATE_DIM]; STATE_DIM] {
        to_rows(&self.covariance)
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Lower-triangular factor `L` with `L L^T = Sigma + lambda I`.
    pub fn precision_factor(&self) -> [[f64; STATE_DIM]; STATE_DIM] {
        to_rows(&self.factor)
    }

    /// `D_M(s) = sqrt((s - mu)^T (Sigma + lambda I)^{-1} (s - mu))`.
    pub fn mahalanobis(&self, state: &StateVector) -> Result<f64> {
        if !state.is_finite() {
            return Err(invalid_input("state contains a non-finite component"));
        }
        let d = Vec8::from_column_slice(state.as_slice()) - self.mean;
        // forward substitution L y = d
        let mut y = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            let mut acc = d[i];
            for j in 0..i {
                acc -= self.factor[(i, j)] * y[j];
            }
            y[i] = acc / self.factor[(i, i)];
        }
        Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

fn to_rows(m: &Mat8) -> [[f64; STATE_DIM]; STATE_DIM] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    #[default]
    Percentile,
    Youden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyThreshold {
    pub value: f64,
    pub quantile_level: f64,
    pub source: ThresholdSource,
}

fn nearest_rank(n: usize, level: f64) -> usize {
    ((level * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize
}

/// Threshold at the `ceil(gamma * n)`-th smallest distance.
pub fn fit_threshold(distances: &[f64], gamma: f64) -> Result<SafetyThreshold> {
    if distances.is_empty() {
        return Err(invalid_input("no distances to calibrate a threshold on"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid_config(format!("gamma {gamma} outside (0, 1]")));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(invalid_input("distances must be finite"));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SafetyThreshold {
        value: sorted[nearest_rank(sorted.len(), gamma) - 1],
        quantile_level: gamma,
        source: ThresholdSource::Percentile,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Safe,
    Unsafe,
}

/// `Unsafe` iff the distance strictly exceeds the threshold.
pub fn monitor(
    model: &GaussianStateModel,
    threshold: &SafetyThreshold,
    state: &StateVector,
) -> Result<Verdict> {
    Ok(if model.mahalanobis(state)? > threshold.value {
        Verdict::Unsafe
    } else {
        Verdict::Safe
    })
}

/// Which episodes supply the distances a per-level threshold is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPool {
    #[default]
    SuccessOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenPoint {
    pub confidence: f64,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub j_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoudenResult {
    pub best_confidence: f64,
    pub threshold: f64,
    pub j_score: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub fpr_penalty: f64,
    /// One point per grid entry, in grid order.
    pub curve: Vec<YoudenPoint>,
}

impl YoudenResult {
    pub fn safety_threshold(&self) -> SafetyThreshold {
        SafetyThreshold {
            value: self.threshold,
            quantile_level: self.best_confidence,
            source: ThresholdSource::Youden,
        }
    }
}

/// Sweep confidence levels and keep the one maximizing
/// `J = TPR - fpr_penalty * FPR`, failures being the positive class.
///
/// `labeled_runs` holds the per-episode maximum distance with its outcome.
/// Ties in `J` go to the larger confidence level.
pub fn tune_threshold_youden(
    labeled_runs: &[(f64, Outcome)],
    confidence_grid: &[f64],
    fpr_penalty: f64,
    pool: ThresholdPool,
) -> Result<YoudenResult> {
    if confidence_grid.is_empty() {
        return Err(invalid_config("confidence grid is empty"));
    }
    if !fpr_penalty.is_finite() || fpr_penalty < 0.0 {
        return Err(invalid_config("fpr_penalty must be non-negative"));
    }
    let failures: Vec<f64> = labeled_runs.iter().filter(|r| r.1.is_failure()).map(|r| r.0).collect();
    let successes: Vec<f64> = labeled_runs.iter().filter(|r| !r.1.is_failure()).map(|r| r.0).collect();
    if failures.is_empty() || successes.is_empty() {
        return Err(invalid_input("threshold tuning needs both successful and failed runs"));
    }
    let reference: Vec<f64> = match pool {
        ThresholdPool::SuccessOnly => successes.clone(),
        ThresholdPool::All => labeled_runs.iter().map(|r| r.0).collect(),
    };
    let rate = |group: &[f64], t: f64| group.iter().filter(|&&d| d > t).count() as f64 / group.len() as f64;

    let mut curve = Vec::with_capacity(confidence_grid.len());
    for &confidence in confidence_grid {
        let threshold = fit_threshold(&reference, confidence)?.value;
        let tpr = rate(&failures, threshold);
        let fpr = rate(&successes, threshold);
        curve.push(YoudenPoint { confidence, threshold, tpr, fpr, j_score: tpr - fpr_penalty * fpr });
    }
    let best = curve
        .iter()
        .copied()
        .reduce(|best, p| {
            if p.j_score > best.j_score || (p.j_score == best.j_score && p.confidence > best.confidence) {
                p
            } else {
                best
            }
        })
        .expect("grid is non-empty");
    Ok(YoudenResult {
        best_confidence: best.confidence,
        threshold: best.threshold,
        j_score: best.j_score,
        tpr: best.tpr,
        fpr: best.fpr,
        fpr_penalty,
        curve,
    })
}

/// Evenly spaced confidence grid `[lo, hi]` with `n` points.
pub fn confidence_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// A fitted Gaussian paired with its alarm threshold.
#[derive(Debug, Clone)]
pub struct Detector {
    pub model: GaussianStateModel,
    pub threshold: SafetyThreshold,
}

/// On-disk form of a [`Detector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArtifact {
    pub mean: [f64; STATE_DIM],
    /// Row-major.
    pub covariance: Vec<f64>,
    pub ridge: f64,
    pub sample_count: usize,
    pub threshold: f64,
    pub quantile_level: f64,
    #[serde(default)]
    pub threshold_source: ThresholdSource,
}

impl Detector {
    pub fn new(model: GaussianStateModel, threshold: SafetyThreshold) -> Self {
        Self { model, threshold }
    }

    pub fn distance(&self, state: &StateVector) -> Result<f64> {
        self.model.mahalanobis(state)
    }

    pub fn check(&self, state: &StateVector) -> Result<Verdict> {
        monitor(&self.model, &self.threshold, state)
    }

    pub fn to_artifact(&self) -> DetectorArtifact {
        DetectorArtifact {
            mean: self.model.mean(),
            covariance: self.model.covariance().iter().flatten().copied().collect(),
            ridge: self.model.ridge,
            sample_count: self.model.sample_count,
            threshold: self.threshold.value,
            quantile_level: self.threshold.quantile_level,
            threshold_source: self.threshold.source,
        }
    }

    pub fn from_artifact(a: &DetectorArtifact) -> Result<Self> {
        if a.covariance.len() != STATE_DIM * STATE_DIM {
            return Err(invalid_config("covariance must have 64 entries"));
        }
        if !a.threshold.is_finite() {
            return Err(invalid_config("threshold must be finite"));
        }
        let model = GaussianStateModel::from_parts(
            Vec8::from_column_slice(&a.mean),
            Mat8::from_row_slice(&a.covariance),
            a.ridge,
            a.sample_count,
        )?;
        Ok(Self {
            model,
            threshold: SafetyThreshold {
                value: a.threshold,
                quantile_level: a.quantile_level,
                source: a.threshold_source,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_artifact())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_artifact(&serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn e(i: usize, v: f64) -> StateVector {
        let mut s = [0.0; STATE_DIM];
        s[i] = v;
        StateVector(s)
    }

    fn model_from(mean: [f64; 8], cov_diag: [f64; 8]) -> GaussianStateModel {
        let cov = Mat8::from_diagonal(&Vec8::from_column_slice(&cov_diag));
        GaussianStateModel::from_parts(Vec8::from_column_slice(&mean), cov, 0.0, 100).unwrap()
    }

    #[test]
    fn two_point_covariance() {
        // mean 0; outer products e1 e1^T + e1 e1^T = 2 e1 e1^T, over N - 1 = 1
        let m = GaussianStateModel::fit(&[e(0, 1.0), e(0, -1.0)], Some(1e-3)).unwrap();
        assert_eq!(m.mean(), [0.0; 8]);
        let cov = m.covariance();
        assert_eq!(cov[0][0], 2.0);
        for i in 0..8 {
            for j in 0..8 {
                if (i, j) != (0, 0) {
                    assert_eq!(cov[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn degenerate_states_need_ridge() {
        let states = vec![StateVector([0.5; 8]); 10];
        assert!(matches!(
            GaussianStateModel::fit(&states, Some(0.0)),
            Err(Error::SingularCovariance { .. })
        ));
        assert!(GaussianStateModel::fit(&states, None).is_err());
        let m = GaussianStateModel::fit(&states, Some(1e-4)).unwrap();
        assert_eq!(m.mahalanobis(&StateVector([0.5; 8])).unwrap(), 0.0);
        assert!(GaussianStateModel::fit(&states[..1], Some(1.0)).is_err());
    }

    #[test]
    fn distance_examples() {
        let m = model_from([0.0; 8], [1.0; 8]);
        assert_eq!(m.mahalanobis(&StateVector([0.0; 8])).unwrap(), 0.0);
        assert!((m.mahalanobis(&e(0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let mut diag = [1.0; 8];
        diag[0] = 4.0;
        let m = model_from([0.0; 8], diag);
        assert!((m.mahalanobis(&e(0, 2.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(m.mahalanobis(&e(3, f64::INFINITY)).is_err());
    }

    #[test]
    fn threshold_examples() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(fit_threshold(&d, 0.99).unwrap().value, 99.0);
        assert_eq!(fit_threshold(&d, 1.0).unwrap().value, 100.0);
        assert_eq!(fit_threshold(&[3.5], 0.2).unwrap().value, 3.5);
        assert!(fit_threshold(&[], 0.9).is_err());
        assert!(fit_threshold(&d, 0.0).is_err());
    }

    #[test]
    fn monitor_is_strict() {
        let m = model_from([0.0; 8], [1.0; 8]);
        let t = SafetyThreshold { value: 2.0, quantile_level: 0.99, source: ThresholdSource::Percentile };
        assert_eq!(monitor(&m, &t, &StateVector([0.0; 8])).unwrap(), Verdict::Safe);
        assert_eq!(monitor(&m, &t, &e(2, 2.0)).unwrap(), Verdict::Safe);
        assert_eq!(monitor(&m, &t, &e(2, 2.0 + 1e-9)).unwrap(), Verdict::Unsafe);
    }

    #[test]
    fn sweep_flips_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let states: Vec<StateVector> = (0..500)
            .map(|_| StateVector(std::array::from_fn(|i| rng.sample::<f64, _>(StandardNormal) * (1.0 + i as f64))))
            .collect();
        let m = GaussianStateModel::fit(&states, Some(0.0)).unwrap();
        let t = SafetyThreshold { value: 3.0, quantile_level: 0.99, source: ThresholdSource::Percentile };
        let mu = m.mean();
        let mut flips = 0;
        let mut last = Verdict::Safe;
        for k in 0..2000 {
            let r = k as f64 * 0.01;
            let mut s = mu;
            s[5] += r;
            let v = monitor(&m, &t, &StateVector(s)).unwrap();
            let d = m.mahalanobis(&StateVector(s)).unwrap();
            assert_eq!(v == Verdict::Unsafe, d > 3.0);
            if v != last {
                flips += 1;
                last = v;
            }
        }
        assert_eq!(flips, 1);
    }

    #[test]
    fn youden_separable_and_single_class() {
        let runs: Vec<(f64, Outcome)> = (0..20)
            .map(|i| (f64::from(i), Outcome::Success))
            .chain((0..10).map(|i| (100.0 + f64::from(i), Outcome::Failure)))
            .collect();
        let grid = confidence_grid(0.5, 1.0, 11);
        let r = tune_threshold_youden(&runs, &grid, 2.0, ThresholdPool::SuccessOnly).unwrap();
        assert_eq!(r.j_score, 1.0);
        assert_eq!(r.best_confidence, 1.0);
        assert_eq!(r.curve.len(), 11);
        let only: Vec<_> = runs.iter().filter(|r| r.1 == Outcome::Success).copied().collect();
        assert!(matches!(
            tune_threshold_youden(&only, &grid, 2.0, ThresholdPool::SuccessOnly),
            Err(Error::InvalidInput(_))
        ));
        let all = tune_threshold_youden(&runs, &grid, 2.0, ThresholdPool::All).unwrap();
        assert!(all.j_score <= 1.0);
    }

    #[test]
    fn youden_null_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let runs: Vec<(f64, Outcome)> = (0..4000)
            .map(|_| {
                let o = if rng.random_bool(0.5) { Outcome::Failure } else { Outcome::Success };
                (rng.random::<f64>(), o)
            })
            .collect();
        let r = tune_threshold_youden(&runs, &confidence_grid(0.5, 1.0, 51), 2.0, ThresholdPool::SuccessOnly)
            .unwrap();
        assert!(r.j_score <= 0.1, "{}", r.j_score);
    }

    #[test]
    fn detector_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<StateVector> = (0..50)
            .map(|_| StateVector(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect();
        let model = GaussianStateModel::fit(&states, None).unwrap();
        let dists: Vec<f64> = states.iter().map(|s| model.mahalanobis(s).unwrap()).collect();
        let det = Detector::new(model, fit_threshold(&dists, 0.99).unwrap());
        let back = Detector::from_json(&det.to_json().unwrap()).unwrap();
        assert_eq!(back.to_artifact(), det.to_artifact());
        for s in &states {
            assert_eq!(back.distance(s).unwrap().to_bits(), det.distance(s).unwrap().to_bits());
        }
    }

    proptest! {
        #[test]
        fn threshold_monotone_in_gamma(
            d in prop::collection::vec(0.0f64..100.0, 1..300),
            a in 0.01f64..1.0,
            b in 0.01f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fit_threshold(&d, lo).unwrap().value <= fit_threshold(&d, hi).unwrap().value);
        }
    }
}
