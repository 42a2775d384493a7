//! Closed-loop evaluation of a learned policy against the MPC expert.
//!
//! The error metric is the RMSE over both control channels,
//!
//! ```text
//! rmse = sqrt( sum_i sum_j (true_u[i][j] - pred_u[i][j])^2 / (2 n) )
//! ```
//!
//! By default `true_u` is the expert's control queried on the states the
//! policy actually visits, so both sequences share one state sequence.
//! [`Pairing::IndependentTrajectories`] instead differences the controls of
//! two trajectories that evolve separately from the same start.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{self, MpcConfig, MpcError};
use crate::plant::{self, Control, RegimeMix, State, Trajectory};
use crate::policy::{policy_rollout, MpcPolicy, Policy};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("control sequences differ in length: {true_len} vs {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("RMSE needs at least one sample")]
    Empty,
    #[error("invalid evaluation configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    OnPolicyStates,
    IndependentTrajectories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_sims: usize,
    pub steps: usize,
    pub regime: RegimeMix,
    pub outside_inflation: f64,
    pub pairing: Pairing,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_sims: 200,
            steps: 250,
            regime: RegimeMix::Mixed,
            outside_inflation: plant::DEFAULT_OUTSIDE_INFLATION,
            pairing: Pairing::OnPolicyStates,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_sims < 1 || self.steps < 1 {
            return Err(EvalError::InvalidConfig("n_sims and steps must be at least 1".into()));
        }
        if !(self.outside_inflation > 1.0) {
            return Err(EvalError::InvalidConfig("outside_inflation must exceed 1".into()));
        }
        Ok(())
    }
}

fn squared_error_sum(true_controls: &[Control], pred_controls: &[Control]) -> f64 {
    true_controls
        .iter()
        .zip(pred_controls)
        .map(|(t, p)| (t.u1 - p.u1).powi(2) + (t.u2 - p.u2).powi(2))
        .sum()
}

pub fn rmse(true_controls: &[Control], pred_controls: &[Control]) -> Result<f64, EvalError> {
    if true_controls.len() != pred_controls.len() {
        return Err(EvalError::LengthMismatch {
            true_len: true_controls.len(),
            pred_len: pred_controls.len(),
        });
    }
    if true_controls.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = true_controls.len() as f64;
    Ok((squared_error_sum(true_controls, pred_controls) / (2.0 * n)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRollout {
    pub expert: Trajectory,
    pub neural: Trajectory,
    /// The expert's control at each state the policy visited.
    pub expert_controls_on_neural_states: Vec<Control>,
    pub diverged: bool,
}

/// Expert-driven and policy-driven rollouts from the same start, plus the
/// expert's answer at each policy-visited state. If anything diverges, all
/// three records are cut to the shortest length and the run is flagged.
pub fn paired_rollout<P: Policy + ?Sized>(
    s0: &State,
    policy: &P,
    steps: usize,
    mpc_cfg: &MpcConfig,
) -> Result<PairedRollout, EvalError> {
    if steps < 1 {
        return Err(EvalError::InvalidConfig("steps must be at least 1".into()));
    }
    let expert = mpc::expert_rollout(s0, steps, mpc_cfg)?;
    let neural = policy_rollout(policy, s0, steps, mpc_cfg.dt);
    let mut labels = Vec::with_capacity(neural.trajectory.len());
    let mut label_failed = false;
    for x in &neural.trajectory.states[..neural.trajectory.len()] {
        match mpc::solve(x, mpc_cfg, None) {
            Ok(sol) => labels.push(sol.first_control),
            Err(MpcError::Divergence(_)) => {
                label_failed = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut out = PairedRollout {
        expert: expert.trajectory,
        neural: neural.trajectory,
        expert_controls_on_neural_states: labels,
        diverged: expert.diverged || neural.diverged || label_failed,
    };
    if out.diverged {
        let n = out.expert.len().min(out.neural.len()).min(out.expert_controls_on_neural_states.len());
        out.expert.truncate(n);
        out.neural.truncate(n);
        out.expert_controls_on_neural_states.truncate(n);
    }
    Ok(out)
}

impl PairedRollout {
    /// `(true, predicted)` control sequences for the given pairing.
    pub fn paired_controls(&self, pairing: Pairing) -> (&[Control], &[Control]) {
        match pairing {
            Pairing::OnPolicyStates => (&self.expert_controls_on_neural_states, &self.neural.controls),
            Pairing::IndependentTrajectories => {
                let n = self.expert.len().min(self.neural.len());
                (&self.expert.controls[..n], &self.neural.controls[..n])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEval {
    pub index: usize,
    pub initial_state: State,
    pub inside_bounds: bool,
    pub steps: usize,
    /// `None` when the run diverged before its first step.
    pub rmse: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_overall: f64,
    /// Total number of paired control samples pooled into `rmse_overall`.
    pub pooled_n: usize,
    pub per_sim: Vec<SimEval>,
    pub divergence_count: usize,
    pub config: EvalConfig,
    pub mpc: MpcConfig,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rollouts: Vec<PairedRollout>,
}

/// Start state of evaluation simulation `index`.
pub fn eval_initial_state(cfg: &EvalConfig, mpc_cfg: &MpcConfig, index: usize) -> State {
    let mut rng = seed::rng(seed::item(cfg.seed, index));
    plant::sample_initial_state_with(&mpc_cfg.bounds, cfg.regime.regime_for(index), cfg.outside_inflation, &mut rng)
}

/// Pools every paired step of every simulation into one RMSE.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    cfg: &EvalConfig,
    mpc_cfg: &MpcConfig,
) -> Result<EvalReport, EvalError> {
    Ok(evaluate_with_rollouts(policy, cfg, mpc_cfg)?.report)
}

pub fn evaluate_with_rollouts<P: Policy + ?Sized>(
    policy: &P,
    cfg: &EvalConfig,
    mpc_cfg: &MpcConfig,
) -> Result<Evaluation, EvalError> {
    cfg.validate()?;
    mpc_cfg.validate()?;
    let rollouts: Vec<PairedRollout> = (0..cfg.n_sims)
        .into_par_iter()
        .map(|i| paired_rollout(&eval_initial_state(cfg, mpc_cfg, i), policy, cfg.steps, mpc_cfg))
        .collect::<Result<_, _>>()?;

    let mut total = 0.0;
    let mut pooled_n = 0;
    let mut per_sim = Vec::with_capacity(rollouts.len());
    for (index, r) in rollouts.iter().enumerate() {
        let (t, p) = r.paired_controls(cfg.pairing);
        total += squared_error_sum(t, p);
        pooled_n += t.len();
        let s0 = r.neural.states[0];
        per_sim.push(SimEval {
            index,
            initial_state: s0,
            inside_bounds: mpc_cfg.bounds.contains(&s0),
            steps: t.len(),
            rmse: rmse(t, p).ok(),
            diverged: r.diverged,
        });
    }
    if pooled_n == 0 {
        return Err(EvalError::Empty);
    }
    let report = EvalReport {
        rmse_overall: (total / (2.0 * pooled_n as f64)).sqrt(),
        pooled_n,
        divergence_count: rollouts.iter().filter(|r| r.diverged).count(),
        per_sim,
        config: cfg.clone(),
        mpc: mpc_cfg.clone(),
    };
    Ok(Evaluation { report, rollouts })
}

/// The expert itself as a policy; evaluating it yields an RMSE of zero.
pub fn expert_policy(mpc_cfg: &MpcConfig) -> MpcPolicy<'_> {
    MpcPolicy { cfg: mpc_cfg }
}

pub const TRAJECTORY_HEADER: &str = "t,y,v,theta,gamma,u1,u2,source";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Mpc,
    Neural,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Mpc => "mpc",
            Source::Neural => "neural",
        }
    }
}

/// One row per state; the final row leaves `u1,u2` empty.
pub fn trajectory_csv(traj: &Trajectory, source: Source) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for (k, s) in traj.states.iter().enumerate() {
        let t = k as f64 * traj.dt;
        write!(out, "{t:.16e},{:.16e},{:.16e},{:.16e},{:.16e},", s.y, s.v, s.theta, s.gamma)
            .expect("writing to a String cannot fail");
        match traj.controls.get(k) {
            Some(c) => write!(out, "{:.16e},{:.16e},", c.u1, c.u2),
            None => write!(out, ",,"),
        }
        .expect("writing to a String cannot fail");
        out.push_str(source.as_str());
        out.push('\n');
    }
    out
}

/// Parses a file written by [`trajectory_csv`]. The step size is read from
/// the second row's time stamp.
pub fn read_trajectory_csv(path: &Path) -> Result<(Trajectory, Source), EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    let bad = |reason: String| EvalError::Malformed { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err(bad("bad header".into()));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut source = None;
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("row {row}: expected 8 columns, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {row}: bad number {s:?}")));
        times.push(num(f[0])?);
        states.push(State::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?));
        if !f[5].is_empty() || !f[6].is_empty() {
            controls.push(Control::new(num(f[5])?, num(f[6])?));
        }
        let src = match f[7] {
            "mpc" => Source::Mpc,
            "neural" => Source::Neural,
            other => return Err(bad(format!("row {row}: unknown source {other:?}"))),
        };
        if source.is_some_and(|s| s != src) {
            return Err(bad(format!("row {row}: mixed sources")));
        }
        source = Some(src);
    }
    if times.len() < 2 {
        return Err(bad("need at least two rows to recover the step size".into()));
    }
    let trajectory = Trajectory { dt: times[1], states, controls };
    if !trajectory.is_consistent() {
        return Err(bad("state and control counts disagree".into()));
    }
    Ok((trajectory, source.expect("rows were read")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub files: Vec<TrajectoryFile>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub file: String,
    pub sim: usize,
    pub source: Source,
    pub steps: usize,
    pub diverged: bool,
}

pub const TRAJECTORY_MANIFEST: &str = "trajectories.json";

/// Writes `sim{i}_mpc.csv` and `sim{i}_neural.csv` per rollout into `dir`,
/// plus a manifest listing them alongside `config`.
pub fn export_trajectories(
    rollouts: &[PairedRollout],
    dir: &Path,
    config: serde_json::Value,
) -> Result<TrajectoryManifest, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::with_capacity(2 * rollouts.len());
    for (sim, r) in rollouts.iter().enumerate() {
        for (traj, source) in [(&r.expert, Source::Mpc), (&r.neural, Source::Neural)] {
            let file = format!("sim{sim:03}_{}.csv", source.as_str());
            let path = dir.join(&file);
            fs::write(&path, trajectory_csv(traj, source)).map_err(io(&path))?;
            files.push(TrajectoryFile { file, sim, source, steps: traj.len(), diverged: r.diverged });
        }
    }
    let manifest = TrajectoryManifest { files, config };
    let path = dir.join(TRAJECTORY_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io(&path))?;
    Ok(manifest)
}
