//! Labeled datasets: expert generation, Gaussian perturbation, aggregation,
//! train/validation splitting and CSV persistence.
//!
//! The CSV layout is a `y,v,theta,gamma,u1,u2` header followed by one sample
//! per row, each value written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{self, MpcConfig, MpcError};
use crate::plant::{self, Control, RegimeMix, State};
use crate::seed;

pub const CSV_HEADER: &str = "y,v,theta,gamma,u1,u2";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad header {found:?}, expected {CSV_HEADER:?}")]
    BadHeader { found: String },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: non-finite value in column {column}")]
    NonFinite { row: usize, column: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub state: State,
    pub control: Control,
}

impl LabeledSample {
    pub fn is_finite(&self) -> bool {
        self.state.is_finite() && self.control.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExpertRollout,
    Perturbed,
    /// States visited by the policy trained at iteration `k - 1`, labeled by the MPC.
    DaggerIteration(usize),
    Aggregated,
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, provenance: Provenance) -> Self {
        Self { samples, provenance }
    }

    pub fn empty(provenance: Provenance) -> Self {
        Self::new(Vec::new(), provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_sims: usize,
    pub steps_per_sim: usize,
    pub regime: RegimeMix,
    pub outside_inflation: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_sims: 1600,
            steps_per_sim: 250,
            regime: RegimeMix::Inside,
            outside_inflation: plant::DEFAULT_OUTSIDE_INFLATION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config: GenerationConfig,
    pub mpc: MpcConfig,
    pub samples: usize,
    pub divergences: usize,
    /// Samples missing from `n_sims * steps_per_sim` because of divergence.
    pub shortfall: usize,
}

/// Runs `n_sims` expert rollouts and concatenates their samples in
/// simulation order. Simulation `i` draws its start from seed `seed + i`.
pub fn generate_expert_dataset(
    cfg: &GenerationConfig,
    mpc_cfg: &MpcConfig,
) -> Result<(Dataset, GenerationReport), DataError> {
    if cfg.n_sims < 1 || cfg.steps_per_sim < 1 {
        return Err(DataError::InvalidArgument("n_sims and steps_per_sim must be at least 1".into()));
    }
    mpc_cfg.validate()?;
    let rollouts: Vec<mpc::ExpertRollout> = (0..cfg.n_sims)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::item(cfg.seed, i));
            let s0 = plant::sample_initial_state_with(
                &mpc_cfg.bounds,
                cfg.regime.regime_for(i),
                cfg.outside_inflation,
                &mut rng,
            );
            mpc::expert_rollout(&s0, cfg.steps_per_sim, mpc_cfg)
        })
        .collect::<Result<_, _>>()?;

    let divergences = rollouts.iter().filter(|r| r.diverged).count();
    let samples: Vec<LabeledSample> = rollouts.into_iter().flat_map(|r| r.samples).collect();
    let report = GenerationReport {
        config: cfg.clone(),
        mpc: mpc_cfg.clone(),
        samples: samples.len(),
        divergences,
        shortfall: cfg.n_sims * cfg.steps_per_sim - samples.len(),
    };
    Ok((Dataset::new(samples, Provenance::ExpertRollout), report))
}

/// Labels each state with the first control of a cold-started MPC solve.
pub fn label_states(states: &[State], mpc_cfg: &MpcConfig) -> Result<Vec<LabeledSample>, MpcError> {
    states
        .par_iter()
        .map(|s| {
            let sol = mpc::solve(s, mpc_cfg, None)?;
            Ok(LabeledSample { state: *s, control: sol.first_control })
        })
        .collect()
}

/// Adds zero-mean Gaussian noise with per-component standard deviation
/// `sigma` to every state. Sample `i` draws its noise from seed `seed + i`.
/// With `relabel`, perturbed states get fresh MPC labels; otherwise the
/// original controls are kept.
pub fn perturb_states(
    d: &Dataset,
    sigma: [f64; 4],
    relabel: bool,
    mpc_cfg: &MpcConfig,
    seed: u64,
) -> Result<Dataset, DataError> {
    if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(DataError::InvalidArgument("sigma must be finite and non-negative".into()));
    }
    let noisy: Vec<LabeledSample> = d
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, smp)| {
            let mut rng = seed::rng(seed::item(seed, i));
            let mut a = smp.state.to_array();
            for (c, s) in a.iter_mut().zip(sigma) {
                let z: f64 = rng.sample(StandardNormal);
                *c += s * z;
            }
            LabeledSample { state: State::from_array(a), control: smp.control }
        })
        .collect();
    let samples = if relabel {
        let states: Vec<State> = noisy.iter().map(|s| s.state).collect();
        label_states(&states, mpc_cfg)?
    } else {
        noisy
    };
    Ok(Dataset::new(samples, Provenance::Perturbed))
}

/// `d1` followed by `d2`.
pub fn aggregate(d1: &Dataset, d2: &Dataset) -> Dataset {
    let mut samples = Vec::with_capacity(d1.len() + d2.len());
    samples.extend_from_slice(&d1.samples);
    samples.extend_from_slice(&d2.samples);
    Dataset::new(samples, Provenance::Aggregated)
}

/// Number of training samples for a `fraction` split of `n` (floor, with the
/// product snapped to the nearest integer when it is one up to rounding).
pub fn train_count(n: usize, fraction: f64) -> usize {
    let x = n as f64 * fraction;
    let snapped = x.round();
    let k = if (x - snapped).abs() < 1e-9 { snapped } else { x.floor() };
    (k as usize).min(n)
}

/// Seeded shuffle, then the first `floor(n * fraction)` samples train.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    Ok(split_at(d, train_count(d.len(), train_fraction), seed))
}

/// Seeded shuffle, then the first `n_train` samples train and the rest validate.
pub fn split_at(d: &Dataset, n_train: usize, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_train = n_train.min(d.len());
    let pick = |ids: &[usize]| Dataset::new(ids.iter().map(|&i| d.samples[i]).collect(), d.provenance);
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

pub fn to_csv_string(d: &Dataset) -> String {
    let mut out = String::with_capacity(16 + d.len() * 150);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in &d.samples {
        let v = [s.state.y, s.state.v, s.state.theta, s.state.gamma, s.control.u1, s.control.u2];
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{x:.16e}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(d: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_csv_string(d)).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

const COLUMNS: [&str; 6] = ["y", "v", "theta", "gamma", "u1", "u2"];

/// Parses the CSV layout written by [`save_csv`]. Row numbers in errors are
/// 1-based file lines, so the first sample is row 2.
pub fn parse_csv(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != CSV_HEADER {
        return Err(DataError::BadHeader { found: header.to_string() });
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != COLUMNS.len() {
            return Err(DataError::MalformedRow {
                row,
                reason: format!("expected {} columns, found {}", COLUMNS.len(), fields.len()),
            });
        }
        let mut v = [0.0; 6];
        for (k, f) in fields.iter().enumerate() {
            let x: f64 = f.trim().parse().map_err(|_| DataError::MalformedRow {
                row,
                reason: format!("column {} is not a number: {f:?}", COLUMNS[k]),
            })?;
            if !x.is_finite() {
                return Err(DataError::NonFinite { row, column: COLUMNS[k] });
            }
            v[k] = x;
        }
        samples.push(LabeledSample {
            state: State::new(v[0], v[1], v[2], v[3]),
            control: Control::new(v[4], v[5]),
        });
    }
    Ok(Dataset::new(samples, Provenance::Loaded))
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_csv(&text)
}
