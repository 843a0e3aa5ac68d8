//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file (or no file) reproduces the
//! reference setup.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use vlaguard_core::quantile::{TargetKind, TrainConfig};
use vlaguard_core::simenv::EnvConfig;
use vlaguard_core::smd::ThresholdPool;
use vlaguard_core::STATE_DIM;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "VLAGUARD_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train_frac: f64,
    pub calib_frac: f64,
}

impl Default for Splits {
    fn default() -> Self {
        // 70:30 train:calibration, with a fifth of the episodes held out
        Self { train_frac: 0.56, calib_frac: 0.24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub drift: [f64; STATE_DIM],
    pub onset_step: usize,
    pub n_clean: usize,
    pub n_drifted: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self { drift: [0.0, 0.0, -0.04, 0.06, 0.03, 0.0, 0.0, 0.0], onset_step: 3, n_clean: 100, n_drifted: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct YoudenConfig {
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub pool: ThresholdPool,
}

impl Default for YoudenConfig {
    fn default() -> Self {
        Self { grid_lo: 0.5, grid_hi: 0.999, grid_points: 100, pool: ThresholdPool::SuccessOnly }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), artifact_dir: "artifacts".into(), report_dir: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; episode seeds and the training seed derive from it.
    pub seed: u64,
    pub n_episodes: usize,
    pub n_trials: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub target: TargetKind,
    pub levels: Vec<f64>,
    pub miscoverage: f64,
    /// Candidates per step; overrides `env.num_candidates`.
    pub k: usize,
    pub gamma: f64,
    pub fpr_penalty: f64,
    pub splits: Splits,
    pub ood: OodConfig,
    pub youden: YoudenConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_episodes: 200,
            n_trials: 200,
            env: EnvConfig::default(),
            train: TrainConfig { epochs: 60, ..TrainConfig::default() },
            target: TargetKind::Distance7,
            levels: vec![0.9],
            miscoverage: 0.1,
            k: 10,
            gamma: 0.99,
            fpr_penalty: 2.0,
            splits: Splits::default(),
            ood: OodConfig::default(),
            youden: YoudenConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path`, else the file named by `VLAGUARD_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// Environment with `k` applied.
    pub fn env(&self) -> EnvConfig {
        EnvConfig { num_candidates: self.k, ..self.env.clone() }
    }

    /// Level whose calibrated bound scores candidates.
    pub fn score_level(&self) -> f64 {
        *self.levels.last().expect("validated non-empty")
    }

    /// Seed for the regressor, tied to the master seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.train.seed ^ self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.env().validate()?;
        self.train.validate()?;
        if self.n_episodes < 5 {
            bail!("n_episodes must be at least 5 so every split is populated");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if !matches!(self.target, TargetKind::Distance7 | TargetKind::Distance6) {
            bail!("candidate selection needs a distance target (distance7 or distance6)");
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            bail!("levels must be a non-empty list of values in (0, 1)");
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            bail!("levels must be strictly increasing");
        }
        if !(self.miscoverage > 0.0 && self.miscoverage < 1.0) {
            bail!("miscoverage must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bail!("gamma must lie in (0, 1)");
        }
        if !(self.fpr_penalty >= 0.0 && self.fpr_penalty.is_finite()) {
            bail!("fpr_penalty must be non-negative");
        }
        let Splits { train_frac, calib_frac } = self.splits;
        if !(train_frac > 0.0 && calib_frac > 0.0 && train_frac + calib_frac < 1.0) {
            bail!("split fractions must be positive and leave room for a held-out split");
        }
        if self.youden.grid_points == 0 || !(self.youden.grid_lo <= self.youden.grid_hi) {
            bail!("youden grid must have at least one point and lo <= hi");
        }
        if !(self.youden.grid_lo > 0.0 && self.youden.grid_hi < 1.0) {
            bail!("youden grid must lie inside (0, 1)");
        }
        let Paths { data_dir, artifact_dir, report_dir } = &self.paths;
        if data_dir == artifact_dir || data_dir == report_dir || artifact_dir == report_dir {
            bail!("data, artifact and report directories must be distinct");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_overrides() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 4\nk = 5\n[env]\nmax_steps = 12\n[train]\nepochs = 3\n[splits]\ntrain_frac = 0.5\n",
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.k, cfg.env.max_steps, cfg.train.epochs), (4, 5, 12, 3));
        assert_eq!(cfg.splits.calib_frac, 0.24);
        assert_eq!(cfg.env().num_candidates, 5);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "miscoverage = 1.5",
            "levels = []",
            "levels = [0.9, 0.5]",
            "target = \"cosine\"",
            "k = 0",
            "[splits]\ntrain_frac = 0.8\ncalib_frac = 0.3",
            "unknown_key = 1",
            "[env]\nmax_steps = 0",
            "[paths]\nreport_dir = \"data\"",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
