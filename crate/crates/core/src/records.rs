//! JSONL dataset files: regression samples, expert states and trajectories.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! yields bit-identical values.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::{KeyedSample, KeyedState};
use crate::types::{
    ActionVector, LatentEmbedding, Outcome, RegressionSample, StateVector, Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRecord {
    pub episode: u64,
    pub step: usize,
    pub cand: usize,
    pub z: Vec<f64>,
    pub a_hat: ActionVector,
    pub a_gt: ActionVector,
}

impl From<&KeyedSample> for RegressionRecord {
    fn from(k: &KeyedSample) -> Self {
        Self {
            episode: k.episode,
            step: k.step,
            cand: k.candidate,
            z: k.sample.embedding.0.clone(),
            a_hat: k.sample.predicted_action,
            a_gt: k.sample.expert_action,
        }
    }
}

impl From<RegressionRecord> for KeyedSample {
    fn from(r: RegressionRecord) -> Self {
        Self {
            episode: r.episode,
            step: r.step,
            candidate: r.cand,
            sample: RegressionSample {
                embedding: LatentEmbedding(r.z),
                predicted_action: r.a_hat,
                expert_action: r.a_gt,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStateRecord {
    pub episode: u64,
    pub step: usize,
    pub state: StateVector,
}

impl From<&KeyedState> for ExpertStateRecord {
    fn from(k: &KeyedState) -> Self {
        Self { episode: k.episode, step: k.step, state: k.state }
    }
}

impl From<ExpertStateRecord> for KeyedState {
    fn from(r: ExpertStateRecord) -> Self {
        Self { episode: r.episode, step: r.step, state: r.state }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: StateVector,
    pub action: ActionVector,
    /// Calibrated bounds of all candidates; empty when no scorer ran.
    pub scores: Vec<f64>,
    pub smd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: u64,
    #[serde(default)]
    pub task_id: String,
    pub outcome: Outcome,
    pub halted: bool,
    pub steps: Vec<StepRecord>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        Self {
            episode: t.seed,
            task_id: t.task_id.clone(),
            outcome: t.outcome,
            halted: t.halted,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    state: s.state,
                    action: s.executed_action,
                    scores: s.candidate_scores.clone(),
                    smd: s.smd_score,
                    uncertainty: s.uncertainty_score,
                })
                .collect(),
        }
    }
}

impl TrajectoryRecord {
    /// Largest per-step SMD, if the trajectory was monitored.
    pub fn max_smd(&self) -> Option<f64> {
        self.steps.iter().filter_map(|s| s.smd).reduce(f64::max)
    }

    pub fn uncertainties(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.uncertainty).collect()
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse one record per non-blank line; errors name the offending line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
