//! Calibrated action uncertainty and state-level failure detection for
//! stochastic robot policies.
//!
//! Candidate actions are scored by a conformalized quantile regressor over
//! `(embedding, action)` and the least uncertain one is executed; a
//! Mahalanobis monitor over the robot state flags departures from the
//! expert-state distribution. A small point-reaching simulator provides data
//! for every piece.

pub mod conformal;
pub mod error;
pub mod metrics;
pub mod quantile;
pub mod records;
pub mod selector;
pub mod simenv;
pub mod smd;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    action_error, ActionVector, CandidateAction, LatentEmbedding, Outcome, RegressionSample,
    StateVector, Trajectory, TrajectoryStep, ACTION_DIM, STATE_DIM,
};
