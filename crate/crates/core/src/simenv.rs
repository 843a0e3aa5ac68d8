//! Synthetic stand-in for a frozen stochastic policy and its environment.
//!
//! The task is bounded point reaching in the 8-dim state space. An expert
//! controller steps proportionally toward the goal; the stochastic policy
//! perturbs the expert action by `eps_i * dir_i` with `eps_i ~ N(0, sigma)`
//! and a random unit direction, so the action error of candidate `i` is
//! exactly `|eps_i|`. Embeddings leak `|eps_i|` through their first half
//! (masked by noise and state features) so that error quantiles are
//! learnable from `(z_a, a_hat)`.
//!
//! Only the first action of each proposal is executed before the next
//! observation; chunks never appear here. Every random draw is keyed by
//! `(seed, step, stream)`, so rollouts are pure functions of their inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalCalibration;
use crate::error::{invalid_config, invalid_input, Result};
use crate::quantile::QuantileModel;
use crate::selector::{
    score_candidates, select_cqr, select_default, select_mean, select_random, SelectionResult,
    SelectionStrategy,
};
use crate::smd::{Detector, Verdict};
use crate::types::{
    ActionVector, CandidateAction, LatentEmbedding, Outcome, RegressionSample, StateVector,
    Trajectory, TrajectoryStep, ACTION_DIM, STATE_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// `[min, max]` per state component.
    pub workspace_bounds: [[f64; 2]; STATE_DIM],
    pub target_region_radius: f64,
    pub max_steps: usize,
    pub expert_step_gain: f64,
    /// Per-step clip on each pose delta of the expert action.
    pub max_step: f64,
    pub candidate_noise_sigma: f64,
    /// Per-episode multiplier on `candidate_noise_sigma`, drawn uniformly
    /// from this range; spreads task difficulty across episodes.
    pub noise_scale_range: [f64; 2],
    pub num_candidates: usize,
    pub embedding_dim: usize,
    pub embedding_noise_sigma: f64,
    /// Added to the state every step from `ood_onset_step` on.
    pub ood_drift: [f64; STATE_DIM],
    pub ood_onset_step: Option<usize>,
    pub start_center: [f64; 3],
    pub goal_center: [f64; 3],
    /// Half-width of the uniform jitter on start and goal positions.
    pub position_jitter: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            workspace_bounds: [
                [-0.3, 1.3],
                [-0.25, 0.25],
                [-0.25, 0.25],
                [-0.5, 0.5],
                [-0.5, 0.5],
                [-0.5, 0.5],
                [-5.0, 5.0],
                [-5.0, 5.0],
            ],
            target_region_radius: 0.03,
            max_steps: 30,
            expert_step_gain: 0.4,
            max_step: 0.1,
            candidate_noise_sigma: 0.1,
            noise_scale_range: [0.5, 4.0],
            num_candidates: 10,
            embedding_dim: 16,
            embedding_noise_sigma: 0.3,
            ood_drift: [0.0; STATE_DIM],
            ood_onset_step: None,
            start_center: [0.0, 0.0, 0.0],
            goal_center: [1.0, 0.0, 0.0],
            position_jitter: 0.1,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workspace_bounds.iter().any(|b| !(b[0] < b[1])) {
            return Err(invalid_config("workspace bounds must satisfy min < max on every axis"));
        }
        if self.max_steps == 0 {
            return Err(invalid_config("max_steps must be at least 1"));
        }
        if !(self.expert_step_gain > 0.0 && self.expert_step_gain <= 1.0) {
            return Err(invalid_config("expert_step_gain must lie in (0, 1]"));
        }
        if !(self.target_region_radius > 0.0) || !(self.max_step > 0.0) {
            return Err(invalid_config("target_region_radius and max_step must be positive"));
        }
        if !(self.candidate_noise_sigma >= 0.0) || !(self.embedding_noise_sigma >= 0.0) {
            return Err(invalid_config("noise scales must be non-negative"));
        }
        let [lo, hi] = self.noise_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid_config("noise_scale_range must satisfy 0 < lo <= hi"));
        }
        if self.num_candidates == 0 {
            return Err(invalid_config("num_candidates must be at least 1"));
        }
        if self.embedding_dim < 2 {
            return Err(invalid_config("embedding_dim must be at least 2"));
        }
        if self.ood_drift.iter().any(|d| !d.is_finite()) {
            return Err(invalid_config("ood_drift must be finite"));
        }
        Ok(())
    }

    /// The same environment with drift injected from `onset` on.
    pub fn with_drift(&self, drift: [f64; STATE_DIM], onset: usize) -> Self {
        Self { ood_drift: drift, ood_onset_step: Some(onset), ..self.clone() }
    }

    pub fn drift_active(&self, step: usize) -> bool {
        matches!(self.ood_onset_step, Some(onset) if step >= onset)
            && self.ood_drift.iter().any(|d| *d != 0.0)
    }

    fn in_bounds(&self, s: &StateVector) -> bool {
        s.0.iter().zip(&self.workspace_bounds).all(|(v, b)| *v >= b[0] && *v <= b[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Every candidate equals the expert action.
    Expert,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHandle {
    pub env_config: EnvConfig,
    pub mode: PolicyMode,
}

impl PolicyHandle {
    pub fn new(env_config: EnvConfig, mode: PolicyMode) -> Self {
        Self { env_config, mode }
    }

    /// Candidate noise scale for the episode with this seed.
    pub fn episode_sigma(&self, seed: u64) -> f64 {
        match self.mode {
            PolicyMode::Expert => 0.0,
            PolicyMode::Stochastic => {
                self.env_config.candidate_noise_sigma * episode_noise_scale(&self.env_config, seed)
            }
        }
    }
}

/// Goal position for an episode.
pub type Goal = [f64; 3];

/// Random streams keyed off one episode seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Candidates = 2,
    Process = 3,
    Selection = 4,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a sub-seed for `(seed, step, stream)`.
fn derive_seed(seed: u64, step: usize, stream: Stream) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step as u64) ^ stream as u64)
}

fn rng_for(seed: u64, step: usize, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, step, stream))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Difficulty multiplier of an episode.
pub fn episode_noise_scale(config: &EnvConfig, seed: u64) -> f64 {
    let [lo, hi] = config.noise_scale_range;
    if lo == hi {
        return lo;
    }
    let mut rng = rng_for(config.seed ^ seed, 1, Stream::Init);
    rng.random_range(lo..=hi)
}

/// Initial state and goal for an episode seed.
pub fn initial_conditions(config: &EnvConfig, seed: u64) -> (StateVector, Goal) {
    let mut rng = rng_for(config.seed ^ seed, 0, Stream::Init);
    let j = config.position_jitter;
    let mut jitter = |c: f64| if j > 0.0 { c + rng.random_range(-j..=j) } else { c };
    let start: [f64; 3] = std::array::from_fn(|i| jitter(config.start_center[i]));
    let goal: Goal = std::array::from_fn(|i| jitter(config.goal_center[i]));
    let mut s = [0.0; STATE_DIM];
    s[..3].copy_from_slice(&start);
    s[6] = 1.0;
    (StateVector(s), goal)
}

fn distance_to_goal(state: &StateVector, goal: &Goal) -> f64 {
    let p = state.position();
    (0..3).map(|i| (goal[i] - p[i]).powi(2)).sum::<f64>().sqrt()
}

/// Proportional expert step toward the goal (and toward zero orientation),
/// clipped per component; the gripper closes near the goal.
pub fn expert_action(config: &EnvConfig, state: &StateVector, goal: &Goal) -> ActionVector {
    let g = config.expert_step_gain;
    let clip = |v: f64| v.clamp(-config.max_step, config.max_step);
    let mut a = [0.0; ACTION_DIM];
    for i in 0..3 {
        a[i] = clip(g * (goal[i] - state.0[i]));
        a[3 + i] = clip(-g * state.0[3 + i]);
    }
    a[6] = if distance_to_goal(state, goal) <= 2.0 * config.target_region_radius { 1.0 } else { 0.0 };
    ActionVector(a)
}

/// Fixed pseudo-random features of the state used to fill embeddings.
fn state_features(state: &StateVector, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let mut acc = 0.37 * j as f64;
            for (i, v) in state.0.iter().enumerate() {
                let w = ((j * 31 + i * 17) % 13) as f64 / 6.5 - 1.0;
                acc += w * v;
            }
            acc.sin()
        })
        .collect()
}

/// Embedding for a candidate with noise draw `eps`. The first half of the
/// coordinates carries `|eps| / sigma` (with the base, not the per-episode,
/// noise scale); coordinate 0 carries it unmixed.
fn embed(
    config: &EnvConfig,
    state: &StateVector,
    eps: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> LatentEmbedding {
    let dim = config.embedding_dim;
    let features = state_features(state, dim);
    let signal = if sigma > 0.0 { eps.abs() / sigma } else { 0.0 };
    let half = dim / 2;
    let z = (0..dim)
        .map(|j| {
            let noise = config.embedding_noise_sigma * gaussian(rng);
            if j == 0 {
                signal + noise
            } else if j < half {
                let w = 0.6 + 0.4 * (j as f64 / half as f64);
                w * signal + 0.3 * features[j] + noise
            } else {
                features[j] + noise
            }
        })
        .collect();
    LatentEmbedding(z)
}

/// `K` candidates around the expert action, keyed by `(seed, step)`.
pub fn sample_candidates(
    policy: &PolicyHandle,
    state: &StateVector,
    goal: &Goal,
    k: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<CandidateAction>> {
    if k == 0 {
        return Err(invalid_input("K must be at least 1"));
    }
    let config = &policy.env_config;
    let sigma = policy.episode_sigma(seed);
    let expert = expert_action(config, state, goal);
    let mut rng = rng_for(seed, step, Stream::Candidates);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let eps = sigma * gaussian(&mut rng);
        let mut dir: [f64; ACTION_DIM] = std::array::from_fn(|_| gaussian(&mut rng));
        let norm = ActionVector(dir).norm();
        dir.iter_mut().for_each(|d| *d /= norm);
        let action = if eps == 0.0 { expert } else { expert.add(&ActionVector(dir).scale(eps)) };
        let embedding = embed(config, state, eps, config.candidate_noise_sigma, &mut rng);
        out.push(CandidateAction { action, embedding });
    }
    Ok(out)
}

fn step_dynamics(
    config: &EnvConfig,
    state: &StateVector,
    action: &ActionVector,
    step: usize,
    seed: u64,
    process_sigma: f64,
) -> StateVector {
    let mut rng = rng_for(seed, step, Stream::Process);
    let mut s = state.0;
    for i in 0..6 {
        s[i] += action.0[i] + process_sigma * gaussian(&mut rng);
    }
    let tilt2: f64 = s[3..6].iter().map(|t| t * t).sum();
    s[6] += 0.5 * ((1.0 - 0.5 * tilt2) - s[6]);
    s[7] += 0.5 * (action.0[6] - s[7]);
    if config.drift_active(step) {
        for (v, d) in s.iter_mut().zip(&config.ood_drift) {
            *v += d;
        }
    }
    StateVector(s)
}

/// Calibrated scorer used by the CQR strategy and for logging bounds.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a QuantileModel,
    pub calibration: &'a ConformalCalibration,
}

/// Runtime state monitor attached to a rollout.
#[derive(Debug, Clone, Copy)]
pub struct MonitorHook<'a> {
    pub detector: &'a Detector,
    /// Stop the episode on the first `Unsafe` verdict.
    pub halt_on_unsafe: bool,
}

fn select(
    strategy: SelectionStrategy,
    candidates: &[CandidateAction],
    scores: &[f64],
    seed: u64,
    step: usize,
) -> Result<SelectionResult> {
    match strategy {
        SelectionStrategy::Cqr => select_cqr(candidates, scores),
        SelectionStrategy::Default => select_default(candidates),
        SelectionStrategy::Random => select_random(candidates, derive_seed(seed, step, Stream::Selection)),
        SelectionStrategy::Mean => select_mean(candidates),
    }
}

/// Run one episode.
///
/// Each step samples `K` candidates, selects one, optionally consults the
/// monitor, and applies the action with process noise of scale
/// `0.1 * sigma`. The episode succeeds when the end effector enters the
/// target region and fails on leaving the workspace or timing out.
pub fn rollout(
    policy: &PolicyHandle,
    strategy: SelectionStrategy,
    scorer: Option<Scorer<'_>>,
    monitor: Option<MonitorHook<'_>>,
    seed: u64,
) -> Result<Trajectory> {
    let config = &policy.env_config;
    config.validate()?;
    if strategy == SelectionStrategy::Cqr && scorer.is_none() {
        return Err(invalid_config("the CQR strategy needs a trained model and calibration"));
    }
    let process_sigma = 0.1 * config.candidate_noise_sigma;
    let (mut state, goal) = initial_conditions(config, seed);
    let mut steps = Vec::with_capacity(config.max_steps);
    let mut outcome = Outcome::Failure;
    let mut halted = false;
    for t in 0..config.max_steps {
        let smd_score = monitor.map(|m| m.detector.distance(&state)).transpose()?;
        if let Some(m) = monitor {
            if m.halt_on_unsafe && m.detector.check(&state)? == Verdict::Unsafe {
                halted = true;
                break;
            }
        }
        let candidates = sample_candidates(policy, &state, &goal, config.num_candidates, seed, t)?;
        let scores = match scorer {
            Some(s) => score_candidates(s.model, s.calibration, &candidates)?,
            None => Vec::new(),
        };
        let selection = select(strategy, &candidates, &scores, seed, t)?;
        let uncertainty_score = match (scorer, selection.chosen_index) {
            (Some(_), Some(i)) => Some(scores[i]),
            _ => None,
        };
        let action = selection.chosen_action;
        steps.push(TrajectoryStep {
            state,
            executed_action: action,
            candidates,
            candidate_scores: scores,
            uncertainty_score,
            smd_score,
        });
        state = step_dynamics(config, &state, &action, t, seed, process_sigma);
        if !config.in_bounds(&state) {
            break;
        }
        if distance_to_goal(&state, &goal) < config.target_region_radius {
            outcome = Outcome::Success;
            break;
        }
    }
    if steps.is_empty() {
        // halted before the first action; keep the observed state so the
        // trajectory is never empty
        steps.push(TrajectoryStep {
            state,
            executed_action: ActionVector::ZERO,
            candidates: Vec::new(),
            candidate_scores: Vec::new(),
            uncertainty_score: None,
            smd_score: monitor.map(|m| m.detector.distance(&state)).transpose()?,
        });
    }
    let task_id = if config.ood_onset_step.is_some() { "reach-ood" } else { "reach" };
    Ok(Trajectory { steps, outcome, halted, seed, task_id: task_id.to_string() })
}

/// A regression sample keyed by where it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedSample {
    pub episode: u64,
    pub step: usize,
    pub candidate: usize,
    pub sample: RegressionSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyedState {
    pub episode: u64,
    pub step: usize,
    pub state: StateVector,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<KeyedSample>,
    pub expert_states: Vec<KeyedState>,
    pub trajectories: Vec<Trajectory>,
}

/// Roll out the stochastic policy (default strategy) and the expert on every
/// episode seed, collecting every candidate as a regression sample.
pub fn generate_dataset(config: &EnvConfig, seeds: &[u64]) -> Result<Dataset> {
    if seeds.is_empty() {
        return Err(invalid_input("at least one episode is required"));
    }
    config.validate()?;
    let stochastic = PolicyHandle::new(config.clone(), PolicyMode::Stochastic);
    let expert = PolicyHandle::new(config.clone(), PolicyMode::Expert);
    let mut data = Dataset::default();
    for &seed in seeds {
        let traj = rollout(&stochastic, SelectionStrategy::Default, None, None, seed)?;
        let (_, goal) = initial_conditions(config, seed);
        for (t, step) in traj.steps.iter().enumerate() {
            let a_gt = expert_action(config, &step.state, &goal);
            for (i, c) in step.candidates.iter().enumerate() {
                data.samples.push(KeyedSample {
                    episode: seed,
                    step: t,
                    candidate: i,
                    sample: RegressionSample {
                        embedding: c.embedding.clone(),
                        predicted_action: c.action,
                        expert_action: a_gt,
                    },
                });
            }
        }
        data.trajectories.push(traj);
        let demo = rollout(&expert, SelectionStrategy::Default, None, None, seed)?;
        data.expert_states.extend(
            demo.steps.iter().enumerate().map(|(t, s)| KeyedState { episode: seed, step: t, state: s.state }),
        );
    }
    Ok(data)
}
