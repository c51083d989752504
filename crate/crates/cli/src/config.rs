//! Run configuration shared by every subcommand (TOML).

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use shepherd_core::dataset::ContextConfig;
use shepherd_core::environment::EnvConfig;
use shepherd_core::reward::RewardConfig;
use shepherd_core::scorer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub parallelism: usize,
    pub reward: RewardConfig,
    pub dataset: DatasetSection,
    pub env: EnvConfig,
    pub policy: PolicySection,
    pub scorer: ScorerSection,
    pub train: TrainSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            parallelism: 4,
            reward: RewardConfig::default(),
            dataset: DatasetSection::default(),
            env: EnvConfig::default(),
            policy: PolicySection::default(),
            scorer: ScorerSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub history: usize,
    pub obs_cap_bytes: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            history: 5,
            obs_cap_bytes: 2000,
            val_fraction: 0.1,
            seed: 7,
        }
    }
}

impl DatasetSection {
    pub fn context(&self) -> ContextConfig {
        ContextConfig {
            history: self.history,
            obs_cap_bytes: self.obs_cap_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub k: usize,
    pub price_per_mtok_prompt: f64,
    pub price_per_mtok_completion: f64,
    pub timeout_s: u64,
    pub retries: usize,
    /// Seed of the sim policy's distractor draws.
    pub seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "gpt-5-mini".into(),
            temperature: 0.8,
            k: 4,
            price_per_mtok_prompt: 0.0,
            price_per_mtok_completion: 0.0,
            timeout_s: 120,
            retries: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Feature,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub timeout_s: u64,
    pub retries: usize,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Feature,
            model_path: None,
            url: None,
            timeout_s: 30,
            retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2: t.l2,
            seed: t.seed,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> anyhow::Result<()> {
        self.reward
            .validate()
            .map_err(|e| anyhow::anyhow!("reward: {e}"))?;
        anyhow::ensure!(self.parallelism >= 1, "parallelism: must be >= 1");
        anyhow::ensure!(self.env.budget >= 1, "env.budget: must be >= 1");
        anyhow::ensure!(self.policy.k >= 1, "policy.k: must be >= 1");
        anyhow::ensure!(
            (0.0..=1.0).contains(&self.dataset.val_fraction),
            "dataset.val_fraction: must be in [0, 1]"
        );
        anyhow::ensure!(
            self.train.learning_rate > 0.0,
            "train.learning_rate: must be > 0"
        );
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            l2: self.train.l2,
            seed: self.train.seed,
            step_budget: self.env.budget,
        }
    }
}
