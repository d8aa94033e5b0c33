//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::learner::{LiraConfig, LiraMode, NetworkConfig};
use crate::planner::PlannerConfig;
use crate::{LiraError, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "LIRA_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: LiraMode,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Learning epochs after each collected episode.
    pub epochs_per_episode: usize,
    /// Episodes between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval_trials: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: LiraMode::Proposal,
            seeds: vec![0],
            episodes: 200,
            epochs_per_episode: 1,
            checkpoint_every: 10,
            eval_trials: 30,
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub env: EnvConfig,
    pub lira: LiraConfig,
    pub network: NetworkConfig,
    pub planner: PlannerConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].lines().next().unwrap_or("").trim().to_string()).unwrap_or_default();
            LiraError::config(if field.is_empty() { "<file>".to_string() } else { field }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.lira.validate()?;
        self.planner.validate()?;
        self.env.build()?;
        if self.network.width == 0 {
            return Err(LiraError::config("network.width", "must be positive"));
        }
        let flow = &self.network.flow;
        if flow.bins < 2 {
            return Err(LiraError::config("network.flow.bins", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&flow.tau) {
            return Err(LiraError::config("network.flow.tau", "must lie in [0, 1]"));
        }
        if flow.width == 0 {
            return Err(LiraError::config("network.flow.width", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(LiraError::config("run.seeds", "needs at least one seed"));
        }
        if self.run.eval_trials == 0 {
            return Err(LiraError::config("run.eval_trials", "must be positive"));
        }
        Ok(())
    }

    /// Output directory: the configured one, else `$LIRA_OUTPUT_ROOT/<mode>`,
    /// else `runs/<mode>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.run.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.run.mode.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.lira.rho, 1.5);
        assert_eq!(cfg.lira.beta(), 1e-3);
        assert_eq!(cfg.lira.batch_size, 32);
        assert_eq!(cfg.lira.buffer_capacity, 102_400);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.mode = LiraMode::AblateHrg;
        cfg.lira.state_lambda = true;
        cfg.env = EnvConfig::ChainCrawler(Default::default());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.lira.beta(), 5e-3);
    }

    #[test]
    fn every_mode_reachable() {
        for mode in LiraMode::ALL {
            let text = format!("[run]\nmode = \"{}\"\n", mode.name());
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap().run.mode, mode);
        }
    }

    #[test]
    fn field_level_errors() {
        let err = ExperimentConfig::from_toml("[lira]\nrho = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("lira.rho"), "{err}");
        let err = ExperimentConfig::from_toml("[lira]\nrhoo = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("rhoo"), "{err}");
        let err = ExperimentConfig::from_toml("[env]\nname = \"chain_crawler\"\njoints = 3\n").unwrap_err();
        assert!(err.to_string().contains("joints"), "{err}");
    }
}
