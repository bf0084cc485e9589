//! Flat key-value experiment configuration for `learn`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zsq_core::features::FeatureMap;
use zsq_core::game::{random_game, GarnetSpec, StochasticGame};
use zsq_core::learner::RunConfig;
use zsq_core::policy::floor_radius;

use crate::error::{HarnessError, Result};

/// Keys accepted in a config file and on the `learn` command line. Every
/// value is a scalar; a nested table is rejected by the parser.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub game: Option<PathBuf>,
    pub states: Option<usize>,
    pub actions1: Option<usize>,
    pub actions2: Option<usize>,
    pub branching: Option<usize>,
    pub gamma: Option<f64>,
    pub game_seed: Option<u64>,
    pub features: Option<PathBuf>,
    #[serde(rename = "T")]
    pub outer: Option<usize>,
    #[serde(rename = "K")]
    pub inner: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    #[serde(rename = "M")]
    pub radius: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub start_state: Option<usize>,
    pub instrumented: Option<bool>,
    pub gap_every: Option<usize>,
    pub record_every: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub suite: Option<String>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        ConfigFile { $($field: $top.$field.or($base.$field)),* }
    };
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Values set in `top` win over values in `self`.
    pub fn overlay(self, top: ConfigFile) -> ConfigFile {
        let base = self;
        overlay_fields!(base, top;
            game, states, actions1, actions2, branching, gamma, game_seed, features,
            outer, inner, alpha, beta, tau, radius, lambda, seed, start_state,
            instrumented, gap_every, record_every, output_dir, suite,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameSource {
    File {
        path: PathBuf,
    },
    Generated {
        states: usize,
        actions: [usize; 2],
        branching: usize,
        gamma: f64,
        seed: u64,
    },
}

impl GameSource {
    pub fn load(&self) -> Result<StochasticGame> {
        match self {
            GameSource::File { path } => load_game(path),
            GameSource::Generated {
                states,
                actions,
                branching,
                gamma,
                seed,
            } => {
                let spec = GarnetSpec {
                    n_states: *states,
                    n_actions: *actions,
                    branching: *branching,
                    gamma: *gamma,
                };
                random_game(&spec, &mut ChaCha8Rng::seed_from_u64(*seed)).map_err(|e| HarnessError::config(e.to_string()))
            }
        }
    }
}

/// Reads a game file; a missing or malformed file is a configuration error.
pub fn load_game(path: &Path) -> Result<StochasticGame> {
    StochasticGame::load(path).map_err(|e| HarnessError::config(format!("game file {}: {e}", path.display())))
}

pub fn load_features(path: Option<&Path>, game: &StochasticGame) -> Result<FeatureMap> {
    let features = match path {
        Some(p) => FeatureMap::load(p).map_err(|e| HarnessError::config(format!("feature file {}: {e}", p.display())))?,
        None => FeatureMap::tabular(game.n_states(), game.n_actions()),
    };
    features
        .check_game(game.n_states(), game.n_actions())
        .map_err(|e| HarnessError::config(format!("features do not fit the game: {e}")))?;
    Ok(features)
}

/// Fully resolved `learn` configuration. `radius: None` means the radius is
/// derived from the stepsizes and temperature once the game is known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub game: GameSource,
    pub features: Option<PathBuf>,
    #[serde(rename = "T")]
    pub outer: usize,
    #[serde(rename = "K")]
    pub inner: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    #[serde(rename = "M")]
    pub radius: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub start_state: usize,
    pub instrumented: bool,
    pub gap_every: Option<usize>,
    pub record_every: Option<usize>,
    pub suite: String,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn resolve(file: ConfigFile) -> Result<Self> {
        let generator = [
            file.states.is_some(),
            file.actions1.is_some(),
            file.actions2.is_some(),
            file.branching.is_some(),
            file.gamma.is_some(),
            file.game_seed.is_some(),
        ];
        let game = match (&file.game, generator.iter().any(|&g| g)) {
            (Some(_), true) => {
                return Err(HarnessError::config("give either a game file or generator keys, not both"));
            }
            (Some(path), false) => {
                if !path.is_file() {
                    return Err(HarnessError::config(format!("game file {} does not exist", path.display())));
                }
                GameSource::File { path: path.clone() }
            }
            (None, true) => {
                let states = file
                    .states
                    .ok_or_else(|| HarnessError::config("generator needs `states`"))?;
                GameSource::Generated {
                    states,
                    actions: [file.actions1.unwrap_or(2), file.actions2.unwrap_or(2)],
                    branching: file.branching.unwrap_or(states.min(2)),
                    gamma: file.gamma.unwrap_or(0.9),
                    seed: file.game_seed.unwrap_or(0),
                }
            }
            (None, false) => return Err(HarnessError::config("no game given: pass a game file or generator keys")),
        };
        if let Some(path) = &file.features {
            if !path.is_file() {
                return Err(HarnessError::config(format!("feature file {} does not exist", path.display())));
            }
        }
        for (key, cadence) in [("gap_every", file.gap_every), ("record_every", file.record_every)] {
            if cadence == Some(0) {
                return Err(HarnessError::config(format!("`{key}` must be at least 1")));
            }
        }
        let cfg = Self {
            game,
            features: file.features,
            outer: file.outer.unwrap_or(20),
            inner: file.inner.unwrap_or(5000),
            alpha: file.alpha.unwrap_or(0.05),
            beta: file.beta.unwrap_or(0.002),
            tau: file.tau.unwrap_or(0.1),
            radius: file.radius,
            lambda: file.lambda,
            seed: file.seed.unwrap_or(0),
            start_state: file.start_state.unwrap_or(0),
            instrumented: file.instrumented.unwrap_or(false),
            gap_every: file.gap_every,
            record_every: file.record_every,
            suite: file.suite.unwrap_or_else(|| "learn".to_string()),
            output_dir: file.output_dir,
        };
        if let Some(radius) = cfg.radius {
            if !(radius > 0.0) || !radius.is_finite() {
                return Err(HarnessError::config(format!("M = {radius} must be positive and finite")));
            }
        }
        if let Some(lambda) = cfg.lambda {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(HarnessError::config(format!("lambda = {lambda} must lie in (0, 1]")));
            }
        }
        cfg.run_config(1.0)
            .validate()
            .map_err(|e| HarnessError::config(e.to_string()))?;
        Ok(cfg)
    }

    /// Explicit `M`, or the largest radius whose worst-case softmax policy
    /// keeps every action probability at least `beta / alpha`.
    pub fn effective_radius(&self, max_actions: usize) -> Result<f64> {
        if let Some(radius) = self.radius {
            return Ok(radius);
        }
        let radius = floor_radius(max_actions, self.tau, self.beta / self.alpha);
        if radius.is_finite() && radius > 0.0 {
            Ok(radius)
        } else {
            Err(HarnessError::config(
                "cannot derive M from these stepsizes and action counts; set M explicitly",
            ))
        }
    }

    pub fn run_config(&self, radius: f64) -> RunConfig {
        RunConfig {
            outer: self.outer,
            inner: self.inner,
            tau: self.tau,
            radius,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            start_state: self.start_state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys() {
        let file = ConfigFile::parse("T = 3\nK = 40\ntau = 0.5\nM = 2.0\ninstrumented = true\nstates = 2\n").unwrap();
        assert_eq!(file.outer, Some(3));
        assert_eq!(file.inner, Some(40));
        assert_eq!(file.radius, Some(2.0));
        assert_eq!(file.instrumented, Some(true));
    }

    #[test]
    fn rejects_tables_unknown_keys_and_wrong_types() {
        assert!(ConfigFile::parse("[run]\nT = 3\n").is_err());
        assert!(ConfigFile::parse("temperature = 0.5\n").is_err());
        assert!(ConfigFile::parse("T = \"many\"\n").is_err());
    }

    #[test]
    fn overlay_prefers_the_top_layer() {
        let base = ConfigFile::parse("T = 3\ntau = 0.5\n").unwrap();
        let top = ConfigFile {
            tau: Some(0.2),
            ..Default::default()
        };
        let merged = base.overlay(top);
        assert_eq!(merged.outer, Some(3));
        assert_eq!(merged.tau, Some(0.2));
    }

    #[test]
    fn resolve_applies_defaults_and_checks_values() {
        let cfg = ExperimentConfig::resolve(ConfigFile::parse("states = 2\n").unwrap()).unwrap();
        assert_eq!((cfg.outer, cfg.inner, cfg.seed), (20, 5000, 0));
        assert!(ExperimentConfig::resolve(ConfigFile::parse("states = 2\ntau = 0.0\n").unwrap()).is_err());
        assert!(ExperimentConfig::resolve(ConfigFile::parse("states = 2\ngap_every = 0\n").unwrap()).is_err());
        assert!(ExperimentConfig::resolve(ConfigFile::parse("T = 2\n").unwrap()).is_err());
        assert!(ExperimentConfig::resolve(ConfigFile::parse("game = \"/no/such/file\"\n").unwrap()).is_err());
    }

    #[test]
    fn derived_radius_matches_the_floor_rule() {
        let cfg = ExperimentConfig::resolve(ConfigFile::parse("states = 1\n").unwrap()).unwrap();
        let m = cfg.effective_radius(2).unwrap();
        assert!((m - 0.05 * 24f64.ln()).abs() < 1e-15);
    }
}
