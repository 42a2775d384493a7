//! Behavioral cloning and DAgger drivers.
//!
//! Both drivers take one global seed and derive every component seed from it
//! (see [`crate::seed`]); the resolved seeds are echoed in their reports.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset, GenerationConfig, GenerationReport, LabeledSample, Provenance};
use crate::eval::{self, EvalConfig, EvalError, EvalReport};
use crate::mpc::{self, MpcConfig, MpcError};
use crate::nn::{self, MlpParams, NnError, TrainConfig, TrainHistory};
use crate::plant::{self, RegimeMix, State};
use crate::policy::{policy_rollout, NeuralPolicy};
use crate::seed;

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub sigma: [f64; 4],
    pub relabel: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { sigma: [0.1; 4], relabel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub generation: GenerationConfig,
    /// Train on this CSV instead of generating a dataset.
    pub dataset_csv: Option<PathBuf>,
    /// When set, the dataset is replaced by its perturbed copy before splitting.
    pub perturb: Option<PerturbConfig>,
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            dataset_csv: None,
            perturb: None,
            train_fraction: 0.8,
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            seed: 0,
        }
    }
}

impl BcConfig {
    /// Copy with every component seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.generation.seed = seed::derive(self.seed, "bc/generate");
        c.train.seed = seed::derive(self.seed, "bc/train");
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub config: BcConfig,
    pub generation: Option<GenerationReport>,
    pub dataset_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub history: TrainHistory,
}

/// Generates (or loads) expert data, splits it and trains once. The learned
/// policy never influences which states are in the data.
pub fn behavioral_clone(cfg: &BcConfig) -> Result<(MlpParams, BcReport), ImitationError> {
    let cfg = cfg.resolved();
    cfg.mpc.validate()?;
    cfg.train.validate()?;
    let (dataset, generation) = match &cfg.dataset_csv {
        Some(path) => (data::load_csv(path)?, None),
        None => {
            let (d, r) = data::generate_expert_dataset(&cfg.generation, &cfg.mpc)?;
            (d, Some(r))
        }
    };
    let dataset = match &cfg.perturb {
        Some(p) => data::perturb_states(&dataset, p.sigma, p.relabel, &cfg.mpc, seed::derive(cfg.seed, "bc/perturb"))?,
        None => dataset,
    };
    let (train, val) = data::split(&dataset, cfg.train_fraction, seed::derive(cfg.seed, "bc/split"))?;
    let init = nn::init_params(seed::derive(cfg.seed, "bc/init"));
    let (params, history) = nn::train(&init, &train.samples, &val.samples, &cfg.train)?;
    let report = BcReport {
        dataset_size: dataset.len(),
        train_size: train.len(),
        val_size: val.len(),
        generation,
        history,
        config: cfg,
    };
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerConfig {
    pub initial_train_size: usize,
    pub initial_val_size: usize,
    pub iterations: usize,
    pub added_train_per_iter: usize,
    pub added_val_per_iter: usize,
    pub rollout_steps: usize,
    /// Start regime of the expert rollouts that build the initial dataset.
    pub initial_regime: RegimeMix,
    /// Start regime of the policy rollouts that collect new states.
    pub collection_regime: RegimeMix,
    pub outside_inflation: f64,
    /// Continue from the previous iteration's weights instead of a fresh init.
    pub fine_tune: bool,
    /// Collection stops after this many times the nominal number of rollouts.
    pub max_rollout_factor: usize,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            initial_train_size: 40_000,
            initial_val_size: 10_000,
            iterations: 10,
            added_train_per_iter: 8_000,
            added_val_per_iter: 2_000,
            rollout_steps: 250,
            initial_regime: RegimeMix::Inside,
            collection_regime: RegimeMix::Mixed,
            outside_inflation: plant::DEFAULT_OUTSIDE_INFLATION,
            fine_tune: false,
            max_rollout_factor: 10,
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<(), ImitationError> {
        let sizes = [
            self.initial_train_size,
            self.initial_val_size,
            self.added_train_per_iter,
            self.added_val_per_iter,
            self.rollout_steps,
            self.iterations,
            self.max_rollout_factor,
        ];
        if sizes.contains(&0) {
            return Err(ImitationError::InvalidConfig(
                "dataset sizes, rollout_steps, iterations and max_rollout_factor must be at least 1".into(),
            ));
        }
        if !(self.outside_inflation > 1.0) {
            return Err(ImitationError::InvalidConfig("outside_inflation must exceed 1".into()));
        }
        self.mpc.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Copy with the evaluation seed derived from the global seed. Per-iteration
    /// training and init seeds are derived inside [`dagger`].
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.eval.seed = seed::derive(self.seed, "dagger/eval");
        c.train.seed = seed::derive(self.seed, "dagger/train");
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerIteration {
    pub iteration: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub added_train: usize,
    pub added_val: usize,
    /// Where this iteration's new samples came from.
    pub collected_from: Provenance,
    pub rollouts: usize,
    pub rollout_divergences: usize,
    /// Samples missing from the quota after the rollout cap was reached.
    pub shortfall: usize,
    pub history: TrainHistory,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerReport {
    pub config: DaggerConfig,
    /// Iteration 0 (initial expert data) followed by one entry per iteration.
    pub iterations: Vec<DaggerIteration>,
}

impl DaggerReport {
    pub fn rmse_by_iteration(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.eval.rmse_overall).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DaggerOutcome {
    pub params: MlpParams,
    pub report: DaggerReport,
    /// Trained policy after each iteration, index 0 being the initial policy.
    pub checkpoints: Vec<MlpParams>,
    /// New labeled data of each iteration, index 0 being the initial dataset.
    pub collected: Vec<Dataset>,
}

struct Collection {
    states: Vec<State>,
    rollouts: usize,
    divergences: usize,
}

/// Runs the current policy from fresh starts until `quota` visited states
/// are gathered or the rollout cap is hit.
fn collect_states(cfg: &DaggerConfig, params: &MlpParams, quota: usize, seed_k: u64) -> Collection {
    let policy = NeuralPolicy { params, bounds: cfg.mpc.bounds };
    let nominal = quota.div_ceil(cfg.rollout_steps);
    let cap = cfg.max_rollout_factor * nominal;
    let mut out = Collection { states: Vec::with_capacity(quota), rollouts: 0, divergences: 0 };
    while out.states.len() < quota && out.rollouts < cap {
        let needed = (quota - out.states.len()).div_ceil(cfg.rollout_steps).min(cap - out.rollouts);
        let first = out.rollouts;
        let batch: Vec<_> = (first..first + needed)
            .into_par_iter()
            .map(|r| {
                let mut rng = seed::rng(seed::item(seed_k, r));
                let s0 = plant::sample_initial_state_with(
                    &cfg.mpc.bounds,
                    cfg.collection_regime.regime_for(r),
                    cfg.outside_inflation,
                    &mut rng,
                );
                policy_rollout(&policy, &s0, cfg.rollout_steps, cfg.mpc.dt)
            })
            .collect();
        for r in batch {
            out.rollouts += 1;
            let t = &r.trajectory;
            // States the policy acted on; a diverged run also keeps the state it failed from.
            let visited = if r.diverged { t.states.len() } else { t.len() };
            out.divergences += usize::from(r.diverged);
            out.states.extend_from_slice(&t.states[..visited]);
        }
    }
    out.states.truncate(quota);
    out
}

/// Labels states with cold MPC solves, dropping any whose solve diverges.
fn label_visited(states: &[State], mpc_cfg: &MpcConfig) -> Result<Vec<LabeledSample>, MpcError> {
    let labeled: Vec<Option<LabeledSample>> = states
        .par_iter()
        .map(|s| match mpc::solve(s, mpc_cfg, None) {
            Ok(sol) => Ok(Some(LabeledSample { state: *s, control: sol.first_control })),
            Err(MpcError::Divergence(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    Ok(labeled.into_iter().flatten().collect())
}

fn evaluate_params(params: &MlpParams, cfg: &DaggerConfig) -> Result<EvalReport, EvalError> {
    let policy = NeuralPolicy { params, bounds: cfg.mpc.bounds };
    eval::evaluate(&policy, &cfg.eval, &cfg.mpc)
}

/// DAgger with separate train and validation pools.
///
/// Iteration 0 trains on expert rollouts. Each later iteration rolls out the
/// previous policy, labels the visited states with the MPC, adds them to the
/// pools and retrains (from a fresh init unless `fine_tune`). Every trained
/// policy is evaluated with the same evaluation seed.
pub fn dagger(cfg: &DaggerConfig) -> Result<DaggerOutcome, ImitationError> {
    dagger_with(cfg, |_, _| {})
}

/// [`dagger`] with a callback invoked after each iteration's entry is recorded.
pub fn dagger_with<F>(cfg: &DaggerConfig, mut on_iteration: F) -> Result<DaggerOutcome, ImitationError>
where
    F: FnMut(&DaggerIteration, &MlpParams),
{
    cfg.validate()?;
    let cfg = cfg.resolved();
    let train_cfg_for = |k: usize| TrainConfig { seed: seed::item(cfg.train.seed, k), ..cfg.train.clone() };

    // Iteration 0: expert data.
    let initial_total = cfg.initial_train_size + cfg.initial_val_size;
    let gen_cfg = GenerationConfig {
        n_sims: initial_total.div_ceil(cfg.rollout_steps),
        steps_per_sim: cfg.rollout_steps,
        regime: cfg.initial_regime,
        outside_inflation: cfg.outside_inflation,
        seed: seed::derive(cfg.seed, "dagger/initial"),
    };
    let (mut d0, gen_report) = data::generate_expert_dataset(&gen_cfg, &cfg.mpc)?;
    d0.samples.truncate(initial_total);
    let n_train0 = if d0.len() == initial_total {
        cfg.initial_train_size
    } else {
        d0.len() * cfg.initial_train_size / initial_total
    };
    let (mut train_pool, mut val_pool) = data::split_at(&d0, n_train0, seed::derive(cfg.seed, "dagger/split/0"));

    let init = nn::init_params(seed::derive(cfg.seed, "dagger/init/0"));
    let (mut params, history) = nn::train(&init, &train_pool.samples, &val_pool.samples, &train_cfg_for(0))?;
    let entry = DaggerIteration {
        iteration: 0,
        train_size: train_pool.len(),
        val_size: val_pool.len(),
        added_train: train_pool.len(),
        added_val: val_pool.len(),
        collected_from: Provenance::ExpertRollout,
        rollouts: gen_cfg.n_sims,
        rollout_divergences: gen_report.divergences,
        shortfall: initial_total - d0.len(),
        history,
        eval: evaluate_params(&params, &cfg)?,
    };
    on_iteration(&entry, &params);
    let mut iterations = vec![entry];
    let mut checkpoints = vec![params.clone()];
    let mut collected = vec![d0];

    let quota = cfg.added_train_per_iter + cfg.added_val_per_iter;
    for k in 1..=cfg.iterations {
        let collection = collect_states(&cfg, &params, quota, seed::derive(cfg.seed, &format!("dagger/collect/{k}")));
        let labeled = label_visited(&collection.states, &cfg.mpc)?;
        let new_data = Dataset::new(labeled, Provenance::DaggerIteration(k));
        let n_train = if new_data.len() == quota {
            cfg.added_train_per_iter
        } else {
            new_data.len() * cfg.added_train_per_iter / quota
        };
        let (new_train, new_val) =
            data::split_at(&new_data, n_train, seed::derive(cfg.seed, &format!("dagger/split/{k}")));
        train_pool = data::aggregate(&train_pool, &new_train);
        val_pool = data::aggregate(&val_pool, &new_val);

        let start = if cfg.fine_tune {
            params.clone()
        } else {
            nn::init_params(seed::derive(cfg.seed, &format!("dagger/init/{k}")))
        };
        let (next, history) = nn::train(&start, &train_pool.samples, &val_pool.samples, &train_cfg_for(k))?;
        params = next;
        let entry = DaggerIteration {
            iteration: k,
            train_size: train_pool.len(),
            val_size: val_pool.len(),
            added_train: new_train.len(),
            added_val: new_val.len(),
            collected_from: new_data.provenance,
            rollouts: collection.rollouts,
            rollout_divergences: collection.divergences,
            shortfall: quota - new_data.len(),
            history,
            eval: evaluate_params(&params, &cfg)?,
        };
        on_iteration(&entry, &params);
        iterations.push(entry);
        checkpoints.push(params.clone());
        collected.push(new_data);
    }

    Ok(DaggerOutcome {
        params,
        report: DaggerReport { config: cfg, iterations },
        checkpoints,
        collected,
    })
}
