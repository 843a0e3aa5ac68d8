//! Split-conformal calibration of a quantile model.
//!
//! Conformity scores `S_j = d_j - f_tau(x_j)` are collected on a holdout
//! split; the offset is the `ceil((n + 1)(1 - alpha))`-th smallest score.
//! Adding it to the raw quantile gives an upper bound on the target with
//! marginal coverage of at least `1 - alpha` under exchangeability. Note that
//! the `(n + 1)` correction makes the offset slightly more conservative than
//! covering exactly `1 - alpha` of the calibration points.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::quantile::{QuantileModel, TargetKind};
use crate::types::{ActionVector, LatentEmbedding, RegressionSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    /// Conformal offset `q_tau`.
    pub offset: f64,
    pub miscoverage: f64,
    /// Quantile level `tau` of the model head being calibrated.
    pub level: f64,
    pub calibration_size: usize,
    pub target_kind: TargetKind,
}

impl ConformalCalibration {
    pub fn validate(&self) -> Result<()> {
        if self.calibration_size == 0 {
            return Err(invalid_config("calibration_size must be at least 1"));
        }
        if !(self.miscoverage > 0.0 && self.miscoverage < 1.0) {
            return Err(invalid_config("miscoverage must lie in (0, 1)"));
        }
        if !self.offset.is_finite() {
            return Err(invalid_config("offset must be finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

fn single_level(model: &QuantileModel) -> Result<f64> {
    match model.levels.as_slice() {
        [tau] => Ok(*tau),
        _ => Err(invalid_config(
            "model has several levels; use conformity_scores_at with a designated level",
        )),
    }
}

/// Conformity scores for a single-level model, in input order.
pub fn conformity_scores(model: &QuantileModel, calib: &[RegressionSample]) -> Result<Vec<f64>> {
    conformity_scores_at(model, single_level(model)?, calib)
}

/// Conformity scores against the head at `level`.
pub fn conformity_scores_at(
    model: &QuantileModel,
    level: f64,
    calib: &[RegressionSample],
) -> Result<Vec<f64>> {
    if !model.target_kind.is_scalar() {
        return Err(invalid_config("conformal calibration needs a scalar target"));
    }
    if calib.is_empty() {
        return Err(invalid_input("calibration set is empty"));
    }
    calib
        .iter()
        .map(|s| {
            let target = model.target_kind.target(s)?[0];
            Ok(target - model.predict_at(level, &s.embedding, &s.predicted_action)?)
        })
        .collect()
}

fn conformal_rank(n: usize, miscoverage: f64) -> usize {
    // guard against 0.9 * 10 landing a hair above 9
    (((n + 1) as f64) * (1.0 - miscoverage) - 1e-9).ceil().max(1.0) as usize
}

/// Smallest calibration size for which the conformal offset is finite.
pub fn min_calibration_size(miscoverage: f64) -> usize {
    (1..).find(|&n| conformal_rank(n, miscoverage) <= n).expect("miscoverage > 0 bounds the search")
}

/// Conformal offset `q_tau`: the `ceil((n + 1)(1 - alpha))`-th smallest score.
pub fn conformal_offset(scores: &[f64], miscoverage: f64) -> Result<f64> {
    if !(miscoverage > 0.0 && miscoverage < 1.0) {
        return Err(invalid_config(format!("miscoverage {miscoverage} outside (0, 1)")));
    }
    if scores.is_empty() {
        return Err(invalid_input("no conformity scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid_input("conformity scores must be finite"));
    }
    let n = scores.len();
    let k = conformal_rank(n, miscoverage);
    if k > n {
        return Err(Error::InsufficientCalibration {
            n,
            miscoverage,
            min_n: min_calibration_size(miscoverage),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Compute scores on `calib` and the resulting offset for a single-level model.
pub fn calibrate(
    model: &QuantileModel,
    calib: &[RegressionSample],
    miscoverage: f64,
) -> Result<ConformalCalibration> {
    let level = single_level(model)?;
    calibrate_at(model, level, calib, miscoverage)
}

pub fn calibrate_at(
    model: &QuantileModel,
    level: f64,
    calib: &[RegressionSample],
    miscoverage: f64,
) -> Result<ConformalCalibration> {
    let scores = conformity_scores_at(model, level, calib)?;
    Ok(ConformalCalibration {
        offset: conformal_offset(&scores, miscoverage)?,
        miscoverage,
        level,
        calibration_size: scores.len(),
        target_kind: model.target_kind,
    })
}

/// Calibrated upper bound `f_tau(x) + q_tau`.
pub fn calibrated_bound(
    model: &QuantileModel,
    calibration: &ConformalCalibration,
    embedding: &LatentEmbedding,
    action: &ActionVector,
) -> Result<f64> {
    if model.target_kind != calibration.target_kind {
        return Err(invalid_config(format!(
            "calibration is for {:?} but the model predicts {:?}",
            calibration.target_kind, model.target_kind
        )));
    }
    Ok(model.predict_at(calibration.level, embedding, action)? + calibration.offset)
}

/// Fraction of samples whose true target lies at or below the calibrated bound.
pub fn empirical_coverage(
    model: &QuantileModel,
    calibration: &ConformalCalibration,
    samples: &[RegressionSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid_input("no samples to evaluate coverage on"));
    }
    let mut covered = 0usize;
    for s in samples {
        let target = model.target_kind.target(s)?[0];
        if target <= calibrated_bound(model, calibration, &s.embedding, &s.predicted_action)? {
            covered += 1;
        }
    }
    Ok(covered as f64 / samples.len() as f64)
}
