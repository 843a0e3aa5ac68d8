//! Quantile regression over `(z_a, a_hat)` features.
//!
//! A small tanh feed-forward network maps the normalized concatenation
//! `[z_a ; a_hat]` to one output per quantile level (or seven per level in
//! [`TargetKind::ActionInterval`] mode) and is fit with the pinball loss by
//! seeded mini-batch gradient descent. Targets are never normalized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::types::{
    action_error, target_cosine, target_distance6, ActionVector, LatentEmbedding,
    RegressionSample, ACTION_DIM,
};

/// What the regressor predicts quantiles of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `||a_hat - a_gt||` over all seven components.
    Distance7,
    /// Pose-only distance (DIS-CQR).
    Distance6,
    /// Cosine similarity between `a_hat` and `a_gt` (COS-CQR).
    Cosine,
    /// Per-component expert action values (PIW-CQR).
    ActionInterval,
}

impl TargetKind {
    /// Outputs per quantile level.
    pub fn width(self) -> usize {
        match self {
            TargetKind::ActionInterval => ACTION_DIM,
            _ => 1,
        }
    }

    pub fn is_scalar(self) -> bool {
        self.width() == 1
    }

    /// Regression target for one sample.
    pub fn target(self, sample: &RegressionSample) -> Result<Vec<f64>> {
        let a = &sample.predicted_action;
        let e = &sample.expert_action;
        Ok(match self {
            TargetKind::Distance7 => vec![action_error(a, e)?],
            TargetKind::Distance6 => vec![target_distance6(a, e)?],
            TargetKind::Cosine => vec![target_cosine(a, e)?],
            TargetKind::ActionInterval => {
                if !e.is_finite() {
                    return Err(invalid_input("expert action is not finite"));
                }
                e.0.to_vec()
            }
        })
    }
}

/// Pinball (check) loss of a residual `u = target - prediction`.
pub fn pinball_loss(residual: f64, level: f64) -> Result<f64> {
    check_level(level)?;
    Ok(pinball_unchecked(residual, level))
}

fn pinball_unchecked(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

/// Subgradient of the pinball loss with respect to the prediction; zero at
/// the kink.
fn pinball_grad_pred(u: f64, tau: f64) -> f64 {
    if u > 0.0 {
        -tau
    } else if u < 0.0 {
        1.0 - tau
    } else {
        0.0
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(invalid_config(format!("quantile level {level} outside (0, 1)")))
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(invalid_config("at least one quantile level is required"));
    }
    for &l in levels {
        check_level(l)?;
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid_config("quantile levels must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden weights are drawn from `N(0, (scale / sqrt(fan_in))^2)`.
    pub weight_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64],
            learning_rate: 0.005,
            epochs: 120,
            batch_size: 64,
            seed: 0,
            weight_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(invalid_config("hidden layer sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_config("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid_config("epochs and batch_size must be positive"));
        }
        if !(self.weight_init_scale > 0.0 && self.weight_init_scale.is_finite()) {
            return Err(invalid_config("weight_init_scale must be positive"));
        }
        Ok(())
    }
}

/// Per-feature affine normalization fitted on the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    fn fit(inputs: &[Vec<f64>]) -> Self {
        let dim = inputs[0].len();
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Trained quantile regressor `f_tau`.
///
/// `parameters` holds, for each layer in order, the weight matrix
/// (`out x in`, row-major) followed by the bias vector. Output unit
/// `level_index * width + component` is the head for one level/component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub input_dim: usize,
    pub levels: Vec<f64>,
    pub target_kind: TargetKind,
    pub layer_sizes: Vec<usize>,
    pub parameters: Vec<f64>,
    pub normalization: Normalization,
}

fn parameter_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl QuantileModel {
    /// A model with every parameter zero; it predicts 0 everywhere.
    pub fn zeros(
        input_dim: usize,
        levels: Vec<f64>,
        target_kind: TargetKind,
        hidden_sizes: &[usize],
    ) -> Result<Self> {
        check_levels(&levels)?;
        if input_dim == 0 {
            return Err(invalid_config("input_dim must be positive"));
        }
        let mut layer_sizes = vec![input_dim];
        layer_sizes.extend_from_slice(hidden_sizes);
        layer_sizes.push(levels.len() * target_kind.width());
        let parameters = vec![0.0; parameter_count(&layer_sizes)];
        Ok(Self {
            input_dim,
            levels,
            target_kind,
            layer_sizes,
            parameters,
            normalization: Normalization::identity(input_dim),
        })
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("layer sizes are never empty")
    }

    pub fn width(&self) -> usize {
        self.target_kind.width()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.len()
    }

    /// Replace the flat parameter vector.
    pub fn with_parameters(mut self, parameters: Vec<f64>) -> Result<Self> {
        if parameters.len() != self.parameters.len() {
            return Err(invalid_input(format!(
                "expected {} parameters, got {}",
                self.parameters.len(),
                parameters.len()
            )));
        }
        self.parameters = parameters;
        Ok(self)
    }

    /// Index of `level` in the model's level list (exact match).
    pub fn level_index(&self, level: f64) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    /// Structural checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        check_levels(&self.levels)?;
        if self.layer_sizes.len() < 2
            || self.layer_sizes[0] != self.input_dim
            || self.output_dim() != self.levels.len() * self.width()
        {
            return Err(invalid_config("layer sizes inconsistent with input_dim/levels/target_kind"));
        }
        if self.parameters.len() != parameter_count(&self.layer_sizes) {
            return Err(invalid_config("parameter vector length does not match layer sizes"));
        }
        if self.parameters.iter().any(|p| !p.is_finite()) {
            return Err(invalid_config("model parameters must be finite"));
        }
        if self.normalization.mean.len() != self.input_dim
            || self.normalization.scale.len() != self.input_dim
        {
            return Err(invalid_config("normalization dimension mismatch"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    fn features(&self, embedding: &LatentEmbedding, action: &ActionVector) -> Result<Vec<f64>> {
        let dim = embedding.dim() + ACTION_DIM;
        if dim != self.input_dim {
            return Err(invalid_input(format!(
                "feature dimension {dim} does not match model input_dim {}",
                self.input_dim
            )));
        }
        if !embedding.is_finite() || !action.is_finite() {
            return Err(invalid_input("features must be finite"));
        }
        let mut x = Vec::with_capacity(dim);
        x.extend_from_slice(embedding.as_slice());
        x.extend_from_slice(action.as_slice());
        self.normalization.apply(&mut x);
        Ok(x)
    }

    /// Forward pass; `activations[l]` receives the output of layer `l`
    /// (index 0 is the input itself).
    fn forward_into(&self, x: &[f64], activations: &mut Vec<Vec<f64>>) {
        activations.clear();
        activations.push(x.to_vec());
        let n_layers = self.layer_sizes.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.parameters[offset..offset + fan_out * fan_in];
            let b = &self.parameters[offset + fan_out * fan_in..offset + fan_out * fan_in + fan_out];
            offset += fan_out * fan_in + fan_out;
            let input = &activations[l];
            let mut out = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let z = b[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
            activations.push(out);
        }
    }

    fn raw_output(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        self.forward_into(x, &mut acts);
        acts.pop().expect("forward produces an output layer")
    }

    /// Head outputs before rearrangement, one row per level.
    pub fn predict_raw(
        &self,
        embedding: &LatentEmbedding,
        action: &ActionVector,
    ) -> Result<Vec<Vec<f64>>> {
        let x = self.features(embedding, action)?;
        let out = self.raw_output(&x);
        Ok(out.chunks(self.width()).map(<[f64]>::to_vec).collect())
    }

    /// Per-level predictions, one row per level (length 1, or 7 for
    /// `ActionInterval`). Crossing quantiles are resolved by sorting each
    /// component ascending across levels.
    pub fn predict(
        &self,
        embedding: &LatentEmbedding,
        action: &ActionVector,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rows = self.predict_raw(embedding, action)?;
        let width = self.width();
        let mut column = Vec::with_capacity(rows.len());
        for c in 0..width {
            column.clear();
            column.extend(rows.iter().map(|r| r[c]));
            column.sort_by(f64::total_cmp);
            for (row, v) in rows.iter_mut().zip(&column) {
                row[c] = *v;
            }
        }
        Ok(rows)
    }

    /// Scalar prediction at one of the model's levels.
    pub fn predict_at(
        &self,
        level: f64,
        embedding: &LatentEmbedding,
        action: &ActionVector,
    ) -> Result<f64> {
        if !self.target_kind.is_scalar() {
            return Err(invalid_config("scalar prediction requested from an interval model"));
        }
        let idx = self
            .level_index(level)
            .ok_or_else(|| invalid_config(format!("model has no level {level}")))?;
        Ok(self.predict(embedding, action)?[idx][0])
    }

    fn prepared(&self, samples: &[RegressionSample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if samples.is_empty() {
            return Err(invalid_input("sample list is empty"));
        }
        let mut xs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for s in samples {
            xs.push(self.features(&s.embedding, &s.predicted_action)?);
            ys.push(self.target_kind.target(s)?);
        }
        Ok((xs, ys))
    }

    /// Average pinball loss over samples, levels and output components,
    /// evaluated on the raw heads.
    pub fn batch_loss(&self, samples: &[RegressionSample]) -> Result<f64> {
        let (xs, ys) = self.prepared(samples)?;
        let idx: Vec<usize> = (0..xs.len()).collect();
        Ok(self.loss_and_grad(&xs, &ys, &idx, None))
    }

    /// Batch loss and its gradient with respect to `parameters`.
    pub fn loss_gradient(&self, samples: &[RegressionSample]) -> Result<(f64, Vec<f64>)> {
        let (xs, ys) = self.prepared(samples)?;
        let idx: Vec<usize> = (0..xs.len()).collect();
        let mut grad = vec![0.0; self.parameters.len()];
        let loss = self.loss_and_grad(&xs, &ys, &idx, Some(&mut grad));
        Ok((loss, grad))
    }

    fn loss_and_grad(
        &self,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        batch: &[usize],
        mut grad: Option<&mut Vec<f64>>,
    ) -> f64 {
        let width = self.width();
        let n_terms = (batch.len() * self.output_dim()) as f64;
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut loss = 0.0;
        let mut delta = Vec::new();
        let mut next_delta = Vec::new();
        for &i in batch {
            self.forward_into(&xs[i], &mut acts);
            let out = &acts[n_layers];
            delta.clear();
            for (k, &pred) in out.iter().enumerate() {
                let tau = self.levels[k / width];
                let u = ys[i][k % width] - pred;
                loss += pinball_unchecked(u, tau);
                delta.push(pinball_grad_pred(u, tau) / n_terms);
            }
            let Some(g) = grad.as_deref_mut() else { continue };
            // walk layers backwards; offsets computed from the end
            let mut end = self.parameters.len();
            for l in (0..n_layers).rev() {
                let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                let start = end - (fan_out * fan_in + fan_out);
                let input = &acts[l];
                for j in 0..fan_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    let row = start + j * fan_in;
                    for (gw, a) in g[row..row + fan_in].iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g[start + fan_out * fan_in + j] += d;
                }
                if l > 0 {
                    let w = &self.parameters[start..start + fan_out * fan_in];
                    next_delta.clear();
                    next_delta.resize(fan_in, 0.0);
                    for j in 0..fan_out {
                        let d = delta[j];
                        if d == 0.0 {
                            continue;
                        }
                        for (nd, wv) in next_delta.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                            *nd += d * wv;
                        }
                    }
                    for (nd, a) in next_delta.iter_mut().zip(input) {
                        *nd *= 1.0 - a * a;
                    }
                    std::mem::swap(&mut delta, &mut next_delta);
                }
                end = start;
            }
        }
        loss / n_terms
    }
}

/// Nearest-rank empirical quantile (`ceil(level * n)`-th smallest).
fn empirical_quantile(values: &mut [f64], level: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let k = ((level * n as f64) - 1e-9).ceil().max(1.0) as usize;
    values[k.min(n) - 1]
}

/// Fit a quantile model with the pinball loss.
///
/// The output biases start at the empirical quantiles of the targets and
/// the output weights at zero, so training starts from the best constant
/// predictor. The parameters with the lowest full-batch training loss seen
/// at an epoch boundary are returned.
pub fn train(
    samples: &[RegressionSample],
    levels: &[f64],
    target_kind: TargetKind,
    config: &TrainConfig,
) -> Result<QuantileModel> {
    config.validate()?;
    check_levels(levels)?;
    let first = samples.first().ok_or_else(|| invalid_input("no training samples"))?;
    let input_dim = first.embedding.dim() + ACTION_DIM;
    if samples.iter().any(|s| s.embedding.dim() + ACTION_DIM != input_dim) {
        return Err(invalid_input("training samples have inconsistent embedding dimensions"));
    }

    let mut model = QuantileModel::zeros(input_dim, levels.to_vec(), target_kind, &config.hidden_sizes)?;
    let raw: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut x = s.embedding.0.clone();
            x.extend_from_slice(s.predicted_action.as_slice());
            x
        })
        .collect();
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid_input("training features must be finite"));
    }
    model.normalization = Normalization::fit(&raw);
    let (xs, ys) = model.prepared(samples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_parameters(&mut model, &ys, config, &mut rng)?;

    let all: Vec<usize> = (0..xs.len()).collect();
    let mut best_loss = model.loss_and_grad(&xs, &ys, &all, None);
    let mut best = model.parameters.clone();
    let mut order = all.clone();
    let mut grad = vec![0.0; model.parameters.len()];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.loss_and_grad(&xs, &ys, batch, Some(&mut grad));
            for (p, g) in model.parameters.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        let loss = model.loss_and_grad(&xs, &ys, &all, None);
        if !loss.is_finite() || model.parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(&model.parameters);
        }
    }
    model.parameters = best;
    Ok(model)
}

fn init_parameters(
    model: &mut QuantileModel,
    targets: &[Vec<f64>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n_layers = model.layer_sizes.len() - 1;
    let width = model.width();
    let mut offset = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (model.layer_sizes[l], model.layer_sizes[l + 1]);
        let n_w = fan_out * fan_in;
        if l + 1 < n_layers {
            let sd = config.weight_init_scale / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, sd).map_err(|e| invalid_config(e.to_string()))?;
            for p in &mut model.parameters[offset..offset + n_w] {
                *p = normal.sample(rng);
            }
        } else {
            let bias = &mut model.parameters[offset + n_w..offset + n_w + fan_out];
            let mut column = Vec::with_capacity(targets.len());
            for (k, b) in bias.iter_mut().enumerate() {
                column.clear();
                column.extend(targets.iter().map(|t| t[k % width]));
                *b = empirical_quantile(&mut column, model.levels[k / width]);
            }
        }
        offset += n_w + fan_out;
    }
    Ok(())
}

/// PIW-CQR score: `max(||a - q_lo||, ||q_hi - a||)` for a two-level
/// interval model.
pub fn piw_score(
    model: &QuantileModel,
    embedding: &LatentEmbedding,
    action: &ActionVector,
) -> Result<f64> {
    if model.target_kind != TargetKind::ActionInterval || model.levels.len() != 2 {
        return Err(invalid_config("PIW score needs a two-level ActionInterval model"));
    }
    let rows = model.predict(embedding, action)?;
    let lower = ActionVector::try_from(rows[0].as_slice())?;
    let upper = ActionVector::try_from(rows[1].as_slice())?;
    Ok(action.sub(&lower).norm().max(upper.sub(action).norm()))
}

/// Interval levels `{alpha/2, 1 - alpha/2}` for a PIW model.
pub fn interval_levels(miscoverage: f64) -> Result<[f64; 2]> {
    if !(miscoverage > 0.0 && miscoverage < 1.0) {
        return Err(invalid_config("miscoverage must lie in (0, 1)"));
    }
    Ok([miscoverage / 2.0, 1.0 - miscoverage / 2.0])
}

/// Action-level uncertainty score variants built on quantile outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// Interval width around the action from an `ActionInterval` model.
    Piw,
    /// `1 - c_hat` at the 0.9 level of a `Cosine` model.
    Cos,
    /// Predicted 0.9-level pose distance of a `Distance6` model.
    Dis,
}

impl ScoreVariant {
    pub const LEVEL: f64 = 0.9;

    pub fn target_kind(self) -> TargetKind {
        match self {
            ScoreVariant::Piw => TargetKind::ActionInterval,
            ScoreVariant::Cos => TargetKind::Cosine,
            ScoreVariant::Dis => TargetKind::Distance6,
        }
    }

    pub fn score(
        self,
        model: &QuantileModel,
        embedding: &LatentEmbedding,
        action: &ActionVector,
    ) -> Result<f64> {
        if model.target_kind != self.target_kind() {
            return Err(invalid_config(format!(
                "{self:?} score needs a {:?} model, got {:?}",
                self.target_kind(),
                model.target_kind
            )));
        }
        match self {
            ScoreVariant::Piw => piw_score(model, embedding, action),
            ScoreVariant::Cos => Ok(1.0 - model.predict_at(Self::LEVEL, embedding, action)?),
            ScoreVariant::Dis => model.predict_at(Self::LEVEL, embedding, action),
        }
    }
}
