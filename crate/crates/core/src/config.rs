//! Run configuration shared by every CLI command.
//!
//! One JSON document configures a run. Every key is optional; missing keys
//! take their defaults and unknown keys are rejected. The plant step size is
//! set once under `plant.dt` and copied into the MPC configuration, and
//! per-component seeds are derived from the top-level `seed`; `mpc.dt` and
//! `train.seed` may appear only with the values they resolve to.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GenerationConfig;
use crate::eval::{EvalConfig, Pairing};
use crate::imitation::{BcConfig, DaggerConfig, PerturbConfig};
use crate::mpc::MpcConfig;
use crate::nn::TrainConfig;
use crate::plant::{self, RegimeMix};
use crate::seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub dt: f64,
    pub outside_inflation: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self { dt: plant::DEFAULT_DT, outside_inflation: plant::DEFAULT_OUTSIDE_INFLATION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n_sims: usize,
    pub steps_per_sim: usize,
    pub regime: RegimeMix,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n_sims: 1600, steps_per_sim: 250, regime: RegimeMix::Inside }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcSection {
    pub n_sims: usize,
    pub steps_per_sim: usize,
    pub regime: RegimeMix,
    pub train_fraction: f64,
    pub perturb_sigma: Option<[f64; 4]>,
    pub relabel: bool,
}

impl Default for BcSection {
    fn default() -> Self {
        Self {
            n_sims: 1600,
            steps_per_sim: 250,
            regime: RegimeMix::Inside,
            train_fraction: 0.8,
            perturb_sigma: None,
            relabel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerSection {
    pub initial_train_size: usize,
    pub initial_val_size: usize,
    pub iterations: usize,
    pub added_train_per_iter: usize,
    pub added_val_per_iter: usize,
    pub rollout_steps: usize,
    pub initial_regime: RegimeMix,
    pub collection_regime: RegimeMix,
    pub fine_tune: bool,
    pub max_rollout_factor: usize,
    /// Write each iteration's newly labeled data as CSV.
    pub save_datasets: bool,
}

impl Default for DaggerSection {
    fn default() -> Self {
        let d = DaggerConfig::default();
        Self {
            initial_train_size: d.initial_train_size,
            initial_val_size: d.initial_val_size,
            iterations: d.iterations,
            added_train_per_iter: d.added_train_per_iter,
            added_val_per_iter: d.added_val_per_iter,
            rollout_steps: d.rollout_steps,
            initial_regime: d.initial_regime,
            collection_regime: d.collection_regime,
            fine_tune: d.fine_tune,
            max_rollout_factor: d.max_rollout_factor,
            save_datasets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_sims: usize,
    pub steps: usize,
    pub regime: RegimeMix,
    pub pairing: Pairing,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { n_sims: e.n_sims, steps: e.steps, regime: e.regime, pairing: e.pairing }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    /// Behavioral cloning trains on this CSV instead of generating data.
    pub bc_dataset: Option<PathBuf>,
    /// Model evaluated by `eval`.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plant: PlantSection,
    pub mpc: MpcConfig,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub bc: BcSection,
    pub dagger: DaggerSection,
    pub eval: EvalSection,
    pub paths: DatasetPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            plant: PlantSection::default(),
            mpc: MpcConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            bc: BcSection::default(),
            dagger: DaggerSection::default(),
            eval: EvalSection::default(),
            paths: DatasetPaths::default(),
        }
    }
}

impl RunConfig {
    /// Parses and resolves a config. `mpc.dt` and `train.seed` are accepted
    /// only when they agree with `plant.dt` and the derived training seed, so
    /// a resolved echo loads back unchanged.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        let given_dt = value.pointer("/mpc/dt").cloned();
        let given_seed = value.pointer("/train/seed").cloned();
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let cfg = cfg.resolved();
        if given_dt.is_some_and(|v| v.as_f64() != Some(cfg.plant.dt)) {
            return Err(ConfigError::Invalid("mpc.dt must equal plant.dt; set the step size with plant.dt".into()));
        }
        if given_seed.is_some_and(|v| v.as_u64() != Some(cfg.train.seed)) {
            return Err(ConfigError::Invalid("train.seed is derived from the top-level seed".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Applies the cross-section rules: the MPC uses the plant step size.
    pub fn resolved(mut self) -> Self {
        self.mpc.dt = self.plant.dt;
        self.train.seed = seed::derive(self.seed, "train");
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.mpc.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if !(self.plant.outside_inflation > 1.0) {
            return Err(ConfigError::Invalid("plant.outside_inflation must exceed 1".into()));
        }
        if !(self.bc.train_fraction > 0.0 && self.bc.train_fraction < 1.0) {
            return Err(ConfigError::Invalid("bc.train_fraction must lie in (0, 1)".into()));
        }
        if self.bc.perturb_sigma.is_some_and(|s| s.iter().any(|x| !(x.is_finite() && *x >= 0.0))) {
            return Err(ConfigError::Invalid("bc.perturb_sigma must be non-negative".into()));
        }
        self.eval_config().validate().map_err(|e| invalid(&e))?;
        self.dagger_config().validate().map_err(|e| invalid(&e))?;
        for (name, n) in [
            ("generate.n_sims", self.generate.n_sims),
            ("generate.steps_per_sim", self.generate.steps_per_sim),
            ("bc.n_sims", self.bc.n_sims),
            ("bc.steps_per_sim", self.bc.steps_per_sim),
        ] {
            if n < 1 {
                return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            n_sims: self.generate.n_sims,
            steps_per_sim: self.generate.steps_per_sim,
            regime: self.generate.regime,
            outside_inflation: self.plant.outside_inflation,
            seed: seed::derive(self.seed, "generate"),
        }
    }

    pub fn bc_config(&self) -> BcConfig {
        BcConfig {
            generation: GenerationConfig {
                n_sims: self.bc.n_sims,
                steps_per_sim: self.bc.steps_per_sim,
                regime: self.bc.regime,
                outside_inflation: self.plant.outside_inflation,
                seed: 0,
            },
            dataset_csv: self.paths.bc_dataset.clone(),
            perturb: self.bc.perturb_sigma.map(|sigma| PerturbConfig { sigma, relabel: self.bc.relabel }),
            train_fraction: self.bc.train_fraction,
            train: self.train.clone(),
            mpc: self.mpc.clone(),
            seed: self.seed,
        }
        .resolved()
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_sims: self.eval.n_sims,
            steps: self.eval.steps,
            regime: self.eval.regime,
            outside_inflation: self.plant.outside_inflation,
            pairing: self.eval.pairing,
            seed: seed::derive(self.seed, "eval"),
        }
    }

    pub fn dagger_config(&self) -> DaggerConfig {
        let d = &self.dagger;
        DaggerConfig {
            initial_train_size: d.initial_train_size,
            initial_val_size: d.initial_val_size,
            iterations: d.iterations,
            added_train_per_iter: d.added_train_per_iter,
            added_val_per_iter: d.added_val_per_iter,
            rollout_steps: d.rollout_steps,
            initial_regime: d.initial_regime,
            collection_regime: d.collection_regime,
            outside_inflation: self.plant.outside_inflation,
            fine_tune: d.fine_tune,
            max_rollout_factor: d.max_rollout_factor,
            train: self.train.clone(),
            mpc: self.mpc.clone(),
            eval: self.eval_config(),
            seed: self.seed,
        }
        .resolved()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default().resolved());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sead": 1}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"mpc": {"horizon": 5, "horizn": 3}}"#),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn conflicting_derived_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"mpc": {"dt": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mpc": {"dt": 0.1}, "plant": {"dt": 0.1}}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"train": {"seed": 3}}"#).is_err());
    }

    #[test]
    fn plant_dt_reaches_the_mpc() {
        let c = RunConfig::from_json(r#"{"plant": {"dt": 0.05}}"#).unwrap();
        assert_eq!(c.mpc.dt, 0.05);
        assert_eq!(c.dagger_config().mpc.dt, 0.05);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_json(r#"{"bc": {"train_fraction": 1.5}}"#).unwrap();
        assert!(c.validate().is_err());
        assert!(matches!(RunConfig::from_json("{"), Err(ConfigError::Json(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig { seed: 42, ..Default::default() }.resolved();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), c);
    }
}
