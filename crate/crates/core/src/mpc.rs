//! Receding-horizon expert controller.
//!
//! Each solve minimizes a quadratic regulation cost over a fixed horizon of
//! piecewise-constant controls by single shooting: the control sequence is the
//! only decision variable and states come from rolling the plant forward.
//! The optimizer is projected gradient descent with a monotone Armijo
//! backtracking search. Gradients are exact, computed by an adjoint sweep
//! through the RK4 step sensitivities. Trial steps after the first use the
//! Barzilai-Borwein length, which the backtracking then halves as needed.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledSample;
use crate::plant::{self, Bounds, Control, PlantError, State, Trajectory};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("rollout diverged: {0}")]
    Divergence(#[from] PlantError),
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(String),
    #[error("control sequence has length {got}, horizon is {expected}")]
    HorizonMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub state_weights: [f64; 4],
    pub control_weights: [f64; 2],
    pub terminal_weights: [f64; 4],
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_size: f64,
    pub bounds: Bounds,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            dt: plant::DEFAULT_DT,
            state_weights: [1.0; 4],
            control_weights: [0.1; 2],
            terminal_weights: [10.0; 4],
            max_iters: 200,
            grad_tol: 1e-4,
            step_size: 0.1,
            bounds: Bounds::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::InvalidConfig(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        let weights = self.state_weights.iter().chain(&self.control_weights).chain(&self.terminal_weights);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.grad_tol > 0.0) {
            return bad("grad_tol must be positive");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !self.bounds.is_valid() {
            return bad("bounds must satisfy low < high componentwise");
        }
        Ok(())
    }

    fn q(&self) -> Vector4<f64> {
        Vector4::from(self.state_weights)
    }

    fn r(&self) -> Vector2<f64> {
        Vector2::from(self.control_weights)
    }

    fn p(&self) -> Vector4<f64> {
        Vector4::from(self.terminal_weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub controls: Vec<Control>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize) -> Self {
        Self { controls: vec![Control::ZERO; horizon] }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Drops the first control and repeats the last one.
    pub fn shifted(&self) -> Self {
        let mut controls: Vec<Control> = self.controls.iter().skip(1).copied().collect();
        if let Some(&last) = self.controls.last() {
            controls.push(last);
        }
        Self { controls }
    }

    pub fn project(&mut self, b: &Bounds) {
        for c in &mut self.controls {
            *c = b.clamp_control(*c);
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.controls.iter().flat_map(|c| c.to_array()).collect()
    }

    fn from_flat(u: &[f64]) -> Self {
        Self { controls: u.chunks_exact(2).map(|c| Control::new(c[0], c[1])).collect() }
    }
}

fn check_len(u: &ControlSequence, cfg: &MpcConfig) -> Result<(), MpcError> {
    if u.len() != cfg.horizon {
        return Err(MpcError::HorizonMismatch { expected: cfg.horizon, got: u.len() });
    }
    Ok(())
}

fn quad4(w: &Vector4<f64>, x: &Vector4<f64>) -> f64 {
    w.component_mul(x).dot(x)
}

/// Stage costs are scaled by `dt`; the terminal cost is not.
pub fn rollout_cost(s0: &State, u: &ControlSequence, cfg: &MpcConfig) -> Result<f64, MpcError> {
    check_len(u, cfg)?;
    cost_flat(s0, &u.flat(), cfg)
}

fn cost_flat(s0: &State, u: &[f64], cfg: &MpcConfig) -> Result<f64, MpcError> {
    let (q, r, p) = (cfg.q(), cfg.r(), cfg.p());
    let mut x = *s0;
    let mut cost = 0.0;
    for uk in u.chunks_exact(2) {
        let c = Control::new(uk[0], uk[1]);
        let uv = Vector2::new(uk[0], uk[1]);
        cost += (quad4(&q, &x.to_vector()) + r.component_mul(&uv).dot(&uv)) * cfg.dt;
        x = plant::step(&x, &c, cfg.dt)?;
    }
    Ok(cost + quad4(&p, &x.to_vector()))
}

/// Cost and its exact gradient with respect to every control entry.
pub fn rollout_cost_gradient(
    s0: &State,
    u: &ControlSequence,
    cfg: &MpcConfig,
) -> Result<(f64, Vec<f64>), MpcError> {
    check_len(u, cfg)?;
    cost_and_grad_flat(s0, &u.flat(), cfg)
}

fn cost_and_grad_flat(s0: &State, u: &[f64], cfg: &MpcConfig) -> Result<(f64, Vec<f64>), MpcError> {
    let (q, r, p) = (cfg.q(), cfg.r(), cfg.p());
    let n = u.len() / 2;
    let mut states = Vec::with_capacity(n + 1);
    states.push(*s0);
    let mut cost = 0.0;
    for k in 0..n {
        let x = states[k];
        let uv = Vector2::new(u[2 * k], u[2 * k + 1]);
        cost += (quad4(&q, &x.to_vector()) + r.component_mul(&uv).dot(&uv)) * cfg.dt;
        states.push(plant::step(&x, &Control::new(uv[0], uv[1]), cfg.dt)?);
    }
    let xn = states[n].to_vector();
    cost += quad4(&p, &xn);

    let mut grad = vec![0.0; u.len()];
    let mut lambda = p.component_mul(&xn) * 2.0;
    for k in (0..n).rev() {
        let c = Control::new(u[2 * k], u[2 * k + 1]);
        let (jx, ju): (Matrix4<f64>, Matrix4x2<f64>) = plant::step_jacobians(&states[k], &c, cfg.dt);
        let gu = ju.transpose() * lambda;
        grad[2 * k] = gu[0] + 2.0 * cfg.control_weights[0] * c.u1 * cfg.dt;
        grad[2 * k + 1] = gu[1] + 2.0 * cfg.control_weights[1] * c.u2 * cfg.dt;
        lambda = jx.transpose() * lambda + q.component_mul(&states[k].to_vector()) * (2.0 * cfg.dt);
    }
    Ok((cost, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub first_control: Control,
    pub sequence: ControlSequence,
    pub cost: f64,
    pub iterations: usize,
    /// True when the projected-gradient norm fell below `grad_tol`.
    pub converged: bool,
    /// Cost of the start point followed by every accepted iterate.
    pub cost_history: Vec<f64>,
}

fn project_flat(u: &mut [f64], b: &Bounds) {
    for pair in u.chunks_exact_mut(2) {
        pair[0] = pair[0].clamp(b.control_low[0], b.control_high[0]);
        pair[1] = pair[1].clamp(b.control_low[1], b.control_high[1]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Optimizes the control sequence from `s0` and returns the first control.
///
/// `warm_start` is used as the initial guess after projection; it defaults to
/// the zero sequence. Hitting `max_iters` is not an error: the last accepted
/// iterate, which is also the best one, is returned with `converged = false`.
pub fn solve(
    s0: &State,
    cfg: &MpcConfig,
    warm_start: Option<&ControlSequence>,
) -> Result<Solution, MpcError> {
    cfg.validate()?;
    let mut u = match warm_start {
        Some(w) => {
            check_len(w, cfg)?;
            w.flat()
        }
        None => vec![0.0; 2 * cfg.horizon],
    };
    project_flat(&mut u, &cfg.bounds);

    let (mut cost, mut grad) = cost_and_grad_flat(s0, &u, cfg)?;
    let mut history = vec![cost];
    let mut alpha = cfg.step_size;
    let mut converged = false;
    let mut iterations = 0;
    let mut trial = vec![0.0; u.len()];

    while iterations < cfg.max_iters {
        // Projected-gradient stationarity measure.
        for ((t, ui), gi) in trial.iter_mut().zip(&u).zip(&grad) {
            *t = ui - gi;
        }
        project_flat(&mut trial, &cfg.bounds);
        let pg_norm = trial.iter().zip(&u).map(|(t, ui)| (t - ui).powi(2)).sum::<f64>().sqrt();
        if pg_norm < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut t = alpha;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for ((tr, ui), gi) in trial.iter_mut().zip(&u).zip(&grad) {
                *tr = ui - t * gi;
            }
            project_flat(&mut trial, &cfg.bounds);
            let decrease: f64 = grad.iter().zip(trial.iter().zip(&u)).map(|(g, (a, b))| g * (a - b)).sum();
            if let Ok(c) = cost_flat(s0, &trial, cfg) {
                if c <= cost + ARMIJO * decrease {
                    accepted = Some(c);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(new_cost) = accepted else {
            // No decrease at machine precision: u is as good as this method gets.
            break;
        };
        let (_, new_grad) = cost_and_grad_flat(s0, &trial, cfg)?;
        let s: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        alpha = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-10, 1e10) } else { cfg.step_size };

        u.copy_from_slice(&trial);
        grad = new_grad;
        cost = new_cost;
        history.push(cost);
    }

    let sequence = ControlSequence::from_flat(&u);
    Ok(Solution {
        first_control: sequence.controls[0],
        sequence,
        cost,
        iterations,
        converged,
        cost_history: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRollout {
    pub trajectory: Trajectory,
    pub samples: Vec<LabeledSample>,
    pub diverged: bool,
}

/// Closed-loop simulation with the MPC in the loop, warm-started step to step.
///
/// On divergence the rollout stops and keeps the samples whose step succeeded,
/// so `samples.len() == trajectory.len()` always holds.
pub fn expert_rollout(s0: &State, steps: usize, cfg: &MpcConfig) -> Result<ExpertRollout, MpcError> {
    cfg.validate()?;
    let mut trajectory = Trajectory::new(cfg.dt, *s0);
    let mut samples = Vec::with_capacity(steps);
    let mut warm: Option<ControlSequence> = None;
    let mut diverged = false;
    let mut x = *s0;
    for _ in 0..steps {
        let sol = match solve(&x, cfg, warm.as_ref()) {
            Ok(sol) => sol,
            Err(MpcError::Divergence(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let next = match plant::step(&x, &sol.first_control, cfg.dt) {
            Ok(n) => n,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        samples.push(LabeledSample { state: x, control: sol.first_control });
        trajectory.push(sol.first_control, next);
        warm = Some(sol.sequence.shifted());
        x = next;
    }
    Ok(ExpertRollout { trajectory, samples, diverged })
}
