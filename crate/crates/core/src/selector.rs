//! Selection among K stochastic action candidates.
//!
//! [`select_cqr`] executes the candidate with the lowest calibrated error
//! bound; the remaining strategies are the naive baselines it is compared
//! against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrated_bound, ConformalCalibration};
use crate::error::{invalid_input, Result};
use crate::quantile::QuantileModel;
use crate::types::{ActionVector, CandidateAction, ACTION_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Cqr,
    Default,
    Random,
    Mean,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::Default,
        SelectionStrategy::Random,
        SelectionStrategy::Mean,
        SelectionStrategy::Cqr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Cqr => "cqr",
            SelectionStrategy::Default => "default",
            SelectionStrategy::Random => "random",
            SelectionStrategy::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// `None` for the mean strategy, whose action is synthesized.
    pub chosen_index: Option<usize>,
    pub chosen_action: ActionVector,
    /// One calibrated bound per candidate for `Cqr`, empty otherwise.
    pub scores: Vec<f64>,
    pub strategy: SelectionStrategy,
}

fn non_empty(candidates: &[CandidateAction]) -> Result<()> {
    if candidates.is_empty() {
        Err(invalid_input("candidate set is empty"))
    } else {
        Ok(())
    }
}

/// Calibrated bound of every candidate, in candidate order.
pub fn score_candidates(
    model: &QuantileModel,
    calibration: &ConformalCalibration,
    candidates: &[CandidateAction],
) -> Result<Vec<f64>> {
    non_empty(candidates)?;
    let dim = candidates[0].embedding.dim();
    if candidates.iter().any(|c| c.embedding.dim() != dim) {
        return Err(invalid_input("candidate embeddings have inconsistent dimensions"));
    }
    candidates
        .iter()
        .map(|c| calibrated_bound(model, calibration, &c.embedding, &c.action))
        .collect()
}

/// Index of the smallest score; ties go to the lowest index.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s >= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_cqr(candidates: &[CandidateAction], scores: &[f64]) -> Result<SelectionResult> {
    non_empty(candidates)?;
    if scores.len() != candidates.len() {
        return Err(invalid_input(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid_input("scores contain NaN"));
    }
    let k = argmin(scores).expect("non-empty");
    Ok(SelectionResult {
        chosen_index: Some(k),
        chosen_action: candidates[k].action,
        scores: scores.to_vec(),
        strategy: SelectionStrategy::Cqr,
    })
}

pub fn select_default(candidates: &[CandidateAction]) -> Result<SelectionResult> {
    non_empty(candidates)?;
    Ok(SelectionResult {
        chosen_index: Some(0),
        chosen_action: candidates[0].action,
        scores: Vec::new(),
        strategy: SelectionStrategy::Default,
    })
}

pub fn select_random(candidates: &[CandidateAction], seed: u64) -> Result<SelectionResult> {
    non_empty(candidates)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(0..candidates.len());
    Ok(SelectionResult {
        chosen_index: Some(k),
        chosen_action: candidates[k].action,
        scores: Vec::new(),
        strategy: SelectionStrategy::Random,
    })
}

/// Componentwise mean of all candidate actions, gripper included.
pub fn select_mean(candidates: &[CandidateAction]) -> Result<SelectionResult> {
    non_empty(candidates)?;
    let mut sum = [0.0; ACTION_DIM];
    for c in candidates {
        for (s, v) in sum.iter_mut().zip(c.action.as_slice()) {
            *s += v;
        }
    }
    let k = candidates.len() as f64;
    Ok(SelectionResult {
        chosen_index: None,
        chosen_action: ActionVector(sum.map(|s| s / k)),
        scores: Vec::new(),
        strategy: SelectionStrategy::Mean,
    })
}
