use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{DEFAULT_K, DEFAULT_RIDGE_LAMBDA};
use crate::error::{Error, Result};
use crate::explain::DEFAULT_BACKGROUND_SIZE;
use crate::madcn::ModelConfig;
use crate::seeds::derive_seed;
use crate::training::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.75;

/// Named random streams expanded from the root seed. Training further
/// expands `train` into its shuffle, noise and validation streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubSeeds {
    pub split: u64,
    pub init: u64,
    pub train: u64,
    pub shap: u64,
}

impl SubSeeds {
    pub fn derive(root: u64) -> Self {
        Self {
            split: derive_seed(root, "split"),
            init: derive_seed(root, "init"),
            train: derive_seed(root, "train"),
            shap: derive_seed(root, "shap"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub k: usize,
    pub ridge_lambda: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    #[default]
    Exact,
    Permutation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencePair {
    pub feature: String,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub method: ExplainMethod,
    pub n_permutations: usize,
    pub background_size: usize,
    /// Fields left out of the explained set; they keep the sample's values.
    pub exclude: Vec<String>,
    /// Dataset rows to explain. When empty, the first `max_samples` rows of
    /// `partition` (in split order) are used.
    pub rows: Vec<usize>,
    pub partition: Partition,
    pub max_samples: usize,
    /// Target to explain; the first target when unset.
    pub target: Option<String>,
    pub dependence: Vec<DependencePair>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: ExplainMethod::Exact,
            n_permutations: 128,
            background_size: DEFAULT_BACKGROUND_SIZE,
            exclude: Vec::new(),
            rows: Vec::new(),
            partition: Partition::Test,
            max_samples: 20,
            target: None,
            dependence: Vec::new(),
        }
    }
}

/// Everything a command needs, read from JSON with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Derived from `seed` when absent.
    pub sub_seeds: Option<SubSeeds>,
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Model file read by evaluate, predict and explain.
    pub model_path: Option<PathBuf>,
    pub split_ratio: f64,
    pub model: ModelConfig,
    /// `train.seed` is replaced by `sub_seeds.train` on resolution.
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            sub_seeds: None,
            schema: None,
            data: None,
            model_path: None,
            split_ratio: DEFAULT_SPLIT_RATIO,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies a seed override (which re-derives every sub-seed),
    /// materializes the sub-seeds and validates.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(seed) = seed_override {
            self.seed = seed;
            self.sub_seeds = None;
        }
        let seeds = self.sub_seeds.unwrap_or_else(|| SubSeeds::derive(self.seed));
        self.sub_seeds = Some(seeds);
        self.train.seed = seeds.train;
        self.validate()?;
        Ok(self)
    }

    pub fn seeds(&self) -> SubSeeds {
        self.sub_seeds.unwrap_or_else(|| SubSeeds::derive(self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Argument(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.baselines.k == 0 {
            return Err(Error::Argument("baselines.k must be positive".into()));
        }
        if self.baselines.ridge_lambda.is_nan() || self.baselines.ridge_lambda < 0.0 {
            return Err(Error::Argument("baselines.ridge_lambda must be nonnegative".into()));
        }
        if self.explain.n_permutations == 0 || self.explain.background_size == 0 {
            return Err(Error::Argument(
                "explain.n_permutations and explain.background_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schema_path(&self) -> Result<&Path> {
        self.schema
            .as_deref()
            .ok_or_else(|| Error::Argument("no schema given (set `schema` in the config or pass --schema)".into()))
    }

    pub fn model_file(&self) -> Result<&Path> {
        self.model_path.as_deref().ok_or_else(|| {
            Error::Argument("no model file given (set `model_path` in the config or pass --model)".into())
        })
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Argument("no data file given (set `data` in the config or pass --data)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_materializes_seeds() {
        let cfg = RunConfig::default().resolve(None).unwrap();
        let seeds = cfg.sub_seeds.unwrap();
        assert_eq!(seeds, SubSeeds::derive(DEFAULT_SEED));
        assert_eq!(cfg.train.seed, seeds.train);
        // resolving again is a no-op
        assert_eq!(cfg.clone().resolve(None).unwrap(), cfg);
    }

    #[test]
    fn seed_override_rederives() {
        let cfg = RunConfig::default().resolve(None).unwrap();
        let other = cfg.resolve(Some(7)).unwrap();
        assert_eq!(other.seed, 7);
        assert_eq!(other.sub_seeds, Some(SubSeeds::derive(7)));
    }

    #[test]
    fn explicit_sub_seeds_win_over_the_root() {
        let json = r#"{"seed": 1, "sub_seeds": {"split": 10, "init": 11, "train": 12, "shap": 13}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        let cfg = cfg.resolve(None).unwrap();
        assert_eq!(cfg.seeds().train, 12);
        assert_eq!(cfg.train.seed, 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"explain": {"method": "kernel"}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default().resolve(Some(3)).unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values() {
        let cfg = RunConfig {
            split_ratio: 1.0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.resolve(None), Err(Error::Argument(_))));
    }
}
