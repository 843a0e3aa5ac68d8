//! Metrics relating episode-level uncertainty scores to outcomes.
//!
//! Orientation: failures are the positive class. [`vargha_delaney_a12`]
//! returns the probability that a failure outscores a success (ties count
//! one half), which is the same number as [`roc_auc`]. Tables report the
//! "lower is better" form `1 - A12` next to the AUC; [`cohens_d_from_a12`]
//! is symmetric so either form gives the same `d`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::types::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScore {
    pub score: f64,
    pub outcome: Outcome,
}

impl OutcomeScore {
    pub fn new(score: f64, outcome: Outcome) -> Self {
        Self { score, outcome }
    }
}

fn check_scores(pairs: &[OutcomeScore]) -> Result<()> {
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(invalid_input("scores must be finite"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman correlation between scores and outcomes (Success = 1,
/// Failure = 0), Pearson on average ranks.
pub fn spearman_rho(pairs: &[OutcomeScore]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(invalid_input("Spearman correlation needs at least two pairs"));
    }
    check_scores(pairs)?;
    let scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let outcomes: Vec<f64> = pairs
        .iter()
        .map(|p| if p.outcome.is_failure() { 0.0 } else { 1.0 })
        .collect();
    pearson(&average_ranks(&scores), &average_ranks(&outcomes))
        .ok_or_else(|| Error::UndefinedCorrelation("scores or outcomes are constant".into()))
}

/// Probability that a failure score exceeds a success score, ties counted
/// one half.
pub fn vargha_delaney_a12(failure_scores: &[f64], success_scores: &[f64]) -> Result<f64> {
    if failure_scores.is_empty() || success_scores.is_empty() {
        return Err(invalid_input("both groups must be non-empty"));
    }
    if failure_scores.iter().chain(success_scores).any(|v| !v.is_finite()) {
        return Err(invalid_input("scores must be finite"));
    }
    let mut s = success_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &f in failure_scores {
        let below = s.partition_point(|&x| x < f);
        let not_above = s.partition_point(|&x| x <= f);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (failure_scores.len() as f64 * s.len() as f64))
}

pub fn cohens_d_from_a12(a12: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a12) {
        return Err(invalid_input(format!("A12 {a12} outside [0, 1]")));
    }
    Ok(2.0 * (a12 - 0.5).abs())
}

/// ROC AUC with failures as positives, from the Mann-Whitney rank sum.
pub fn roc_auc(pairs: &[OutcomeScore]) -> Result<f64> {
    check_scores(pairs)?;
    let n_pos = pairs.iter().filter(|p| p.outcome.is_failure()).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid_input("AUC needs both failures and successes"));
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = pairs
        .iter()
        .zip(&ranks)
        .filter(|(p, _)| p.outcome.is_failure())
        .map(|(_, r)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn split_by_outcome(pairs: &[OutcomeScore]) -> (Vec<f64>, Vec<f64>) {
    let mut failures = Vec::new();
    let mut successes = Vec::new();
    for p in pairs {
        match p.outcome {
            Outcome::Failure => failures.push(p.score),
            Outcome::Success => successes.push(p.score),
        }
    }
    (failures, successes)
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_success: usize,
    pub n_failure: usize,
    pub spearman_rho: f64,
    pub abs_rho: f64,
    /// Failure-exceeds probability.
    pub a12_failure_exceeds: f64,
    /// `1 - a12_failure_exceeds`, the lower-is-better table column.
    pub a12: f64,
    pub cohens_d: f64,
    pub auc: f64,
}

pub fn evaluate(method: &str, pairs: &[OutcomeScore]) -> Result<MetricsReport> {
    let (failures, successes) = split_by_outcome(pairs);
    let rho = spearman_rho(pairs)?;
    let exceeds = vargha_delaney_a12(&failures, &successes)?;
    Ok(MetricsReport {
        method: method.to_string(),
        n_success: successes.len(),
        n_failure: failures.len(),
        spearman_rho: rho,
        abs_rho: rho.abs(),
        a12_failure_exceeds: exceeds,
        a12: 1.0 - exceeds,
        cohens_d: cohens_d_from_a12(exceeds)?,
        auc: roc_auc(pairs)?,
    })
}

/// Aligned plain-text table with columns `|rho|`, `A12`, `d`, `AUC`.
pub fn render_table(rows: &[MetricsReport]) -> String {
    let width = rows.iter().map(|r| r.method.len()).chain([6]).max().unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}", "Method", "|rho|", "A12", "d", "AUC");
    let _ = writeln!(out, "{}", "-".repeat(width + 36));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}",
            r.method, r.abs_rho, r.a12, r.cohens_d, r.auc
        );
    }
    out
}

/// How per-step scores are folded into one episode score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}
