//! Domain types shared across the crate and the elementary action-error
//! functions computed between a predicted and an expert action.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

pub const ACTION_DIM: usize = 7;
pub const STATE_DIM: usize = 8;
/// Number of pose components in an action (everything but the gripper).
pub const POSE_DIM: usize = 6;

/// Delta action `[dx, dy, dz, dthx, dthy, dthz, grip]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub [f64; ACTION_DIM]);

/// Robot state `[x, y, z, thx, thy, thz, w, grip]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl ActionVector {
    pub const ZERO: Self = Self([0.0; ACTION_DIM]);

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn pose(&self) -> &[f64] {
        &self.0[..POSE_DIM]
    }

    pub fn grip(&self) -> f64 {
        self.0[6]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] - other.0[i]))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] + other.0[i]))
    }

    pub fn scale(&self, k: f64) -> Self {
        Self(self.0.map(|v| v * k))
    }
}

impl From<[f64; ACTION_DIM]> for ActionVector {
    fn from(v: [f64; ACTION_DIM]) -> Self {
        Self(v)
    }
}

impl TryFrom<&[f64]> for ActionVector {
    type Error = Error;

    fn try_from(v: &[f64]) -> Result<Self> {
        let arr: [f64; ACTION_DIM] = v
            .try_into()
            .map_err(|_| invalid_input(format!("action needs {ACTION_DIM} components, got {}", v.len())))?;
        Ok(Self(arr))
    }
}

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn position(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<[f64; STATE_DIM]> for StateVector {
    fn from(v: [f64; STATE_DIM]) -> Self {
        Self(v)
    }
}

/// Latent embedding `z_a` attached to a sampled action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentEmbedding(pub Vec<f64>);

impl LatentEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One stochastic proposal from the policy: the action and the latent it
/// was decoded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAction {
    pub action: ActionVector,
    pub embedding: LatentEmbedding,
}

/// A `(z_a, a_hat, a_gt)` triple used to fit and calibrate quantile models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub embedding: LatentEmbedding,
    pub predicted_action: ActionVector,
    pub expert_action: ActionVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Failure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: StateVector,
    pub executed_action: ActionVector,
    /// Empty on replay.
    pub candidates: Vec<CandidateAction>,
    /// Calibrated bound of every candidate, when a scorer was available.
    pub candidate_scores: Vec<f64>,
    /// Calibrated bound of the executed candidate.
    pub uncertainty_score: Option<f64>,
    pub smd_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub outcome: Outcome,
    /// The runtime monitor stopped the episode. Halted episodes carry
    /// `Outcome::Failure` since the task was not completed.
    pub halted: bool,
    pub seed: u64,
    pub task_id: String,
}

fn check_finite(a: &ActionVector, b: &ActionVector) -> Result<()> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(invalid_input("action contains a non-finite component"))
    }
}

/// True action error `d_a = ||a_hat - a_gt||_2` over all seven components.
pub fn action_error(predicted: &ActionVector, expert: &ActionVector) -> Result<f64> {
    check_finite(predicted, expert)?;
    Ok(predicted.sub(expert).norm())
}

/// Euclidean distance over the six pose components; the gripper is ignored.
pub fn target_distance6(predicted: &ActionVector, expert: &ActionVector) -> Result<f64> {
    check_finite(predicted, expert)?;
    Ok(predicted
        .pose()
        .iter()
        .zip(expert.pose())
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        .sqrt())
}

/// Cosine similarity between predicted and expert action.
pub fn target_cosine(predicted: &ActionVector, expert: &ActionVector) -> Result<f64> {
    check_finite(predicted, expert)?;
    let np = predicted.norm();
    let ne = expert.norm();
    if np == 0.0 || ne == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm action".into()));
    }
    Ok((predicted.dot(expert) / (np * ne)).clamp(-1.0, 1.0))
}
