//! Closed-loop controllers and the rollout loop shared by DAgger collection
//! and evaluation.

use crate::mpc::{self, MpcConfig, MpcError};
use crate::nn::MlpParams;
use crate::plant::{self, Bounds, Control, State, Trajectory};

pub trait Policy: Sync {
    fn act(&self, s: &State) -> Result<Control, MpcError>;
}

/// The network with its output clamped to the control bounds.
#[derive(Debug, Clone, Copy)]
pub struct NeuralPolicy<'a> {
    pub params: &'a MlpParams,
    pub bounds: Bounds,
}

impl Policy for NeuralPolicy<'_> {
    fn act(&self, s: &State) -> Result<Control, MpcError> {
        Ok(self.params.forward(s, &self.bounds))
    }
}

/// The expert queried statelessly: a cold-started solve at every state, so
/// its control is a pure function of the state.
#[derive(Debug, Clone, Copy)]
pub struct MpcPolicy<'a> {
    pub cfg: &'a MpcConfig,
}

impl Policy for MpcPolicy<'_> {
    fn act(&self, s: &State) -> Result<Control, MpcError> {
        Ok(mpc::solve(s, self.cfg, None)?.first_control)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRollout {
    pub trajectory: Trajectory,
    pub diverged: bool,
}

/// Runs `policy` for up to `steps` steps. A policy failure or a plant
/// divergence stops the rollout and keeps everything recorded before it.
pub fn policy_rollout<P: Policy + ?Sized>(policy: &P, s0: &State, steps: usize, dt: f64) -> PolicyRollout {
    let mut trajectory = Trajectory::new(dt, *s0);
    let mut x = *s0;
    for _ in 0..steps {
        let next = policy.act(&x).ok().and_then(|c| plant::step(&x, &c, dt).ok().map(|n| (c, n)));
        let Some((c, n)) = next else {
            return PolicyRollout { trajectory, diverged: true };
        };
        trajectory.push(c, n);
        x = n;
    }
    PolicyRollout { trajectory, diverged: false }
}
