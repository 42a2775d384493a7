//! Kinematic bicycle plant.
//!
//! The model has four states `(y, v, theta, gamma)` and two controls
//! `(u1, u2)`, with the wheelbase normalized to 1:
//!
//! ```text
//! y'     = v * sin(theta)
//! v'     = u1
//! theta' = v * gamma
//! gamma' = u2
//! ```
//!
//! `y` is the lateral position, `v` the forward velocity, `theta` the heading
//! and `gamma` the tangent of the angle between the front and rear axles.
//! `u1` is the acceleration and `u2` the rate of change of `gamma`.
//!
//! These equations are an assumption of this crate: they are the smallest
//! lane-keeping bicycle model in which every state and control plays the role
//! its name describes. Integration is classical RK4 with the control held
//! constant over the step.

use nalgebra::{Matrix4, Matrix4x2, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default integration step.
pub const DEFAULT_DT: f64 = 0.02;

/// Any state component beyond this magnitude ends a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Default inflation of the state box used for out-of-bounds starts.
pub const DEFAULT_OUTSIDE_INFLATION: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("state diverged: {state:?}")]
    Divergence { state: [f64; 4] },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub y: f64,
    pub v: f64,
    pub theta: f64,
    pub gamma: f64,
}

impl State {
    pub const ORIGIN: State = State { y: 0.0, v: 0.0, theta: 0.0, gamma: 0.0 };

    pub const fn new(y: f64, v: f64, theta: f64, gamma: f64) -> Self {
        Self { y, v, theta, gamma }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.y, self.v, self.theta, self.gamma]
    }

    pub(crate) fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.y, self.v, self.theta, self.gamma)
    }

    pub(crate) fn from_vector(x: &Vector4<f64>) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub u1: f64,
    pub u2: f64,
}

impl Control {
    pub const ZERO: Control = Control { u1: 0.0, u2: 0.0 };

    pub const fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.u1, self.u2]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

/// Time derivative of a [`State`], ordered `(y', v', theta', gamma')`.
pub type StateDerivative = [f64; 4];

/// Admissible state box and control box.
///
/// The state box is open: a state is inside iff every component lies strictly
/// between its limits. Controls are clamped into the closed control box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub state_low: [f64; 4],
    pub state_high: [f64; 4],
    pub control_low: [f64; 2],
    pub control_high: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            state_low: [-2.0, -2.0, -1.0, -1.0],
            state_high: [2.0, 2.0, 1.0, 1.0],
            control_low: [-10.0, -10.0],
            control_high: [10.0, 10.0],
        }
    }
}

impl Bounds {
    pub fn is_valid(&self) -> bool {
        let states = self.state_low.iter().zip(&self.state_high);
        let controls = self.control_low.iter().zip(&self.control_high);
        states.chain(controls).all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi)
    }

    pub fn contains(&self, s: &State) -> bool {
        s.to_array()
            .iter()
            .enumerate()
            .all(|(i, &c)| c > self.state_low[i] && c < self.state_high[i])
    }

    pub fn clamp_control(&self, c: Control) -> Control {
        Control::new(
            c.u1.clamp(self.control_low[0], self.control_high[0]),
            c.u2.clamp(self.control_low[1], self.control_high[1]),
        )
    }

    pub fn control_contains(&self, c: &Control) -> bool {
        c.to_array()
            .iter()
            .enumerate()
            .all(|(i, &u)| u >= self.control_low[i] && u <= self.control_high[i])
    }
}

pub fn clamp_control(c: Control, b: &Bounds) -> Control {
    b.clamp_control(c)
}

pub fn dynamics(s: &State, c: &Control) -> StateDerivative {
    [s.v * s.theta.sin(), c.u1, s.v * s.gamma, c.u2]
}

fn dynamics_vec(x: &Vector4<f64>, c: &Control) -> Vector4<f64> {
    Vector4::new(x[1] * x[2].sin(), c.u1, x[1] * x[3], c.u2)
}

/// Jacobian of [`dynamics`] with respect to the state.
pub fn dynamics_state_jacobian(s: &State) -> Matrix4<f64> {
    let (sin_t, cos_t) = s.theta.sin_cos();
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, sin_t,   s.v * cos_t, 0.0,
        0.0, 0.0,     0.0,         0.0,
        0.0, s.gamma, 0.0,         s.v,
        0.0, 0.0,     0.0,         0.0,
    );
    a
}

/// Jacobian of [`dynamics`] with respect to the control (constant).
pub fn dynamics_control_jacobian() -> Matrix4x2<f64> {
    #[rustfmt::skip]
    let b = Matrix4x2::new(
        0.0, 0.0,
        1.0, 0.0,
        0.0, 0.0,
        0.0, 1.0,
    );
    b
}

fn check(x: Vector4<f64>) -> Result<State, PlantError> {
    if x.iter().all(|c| c.is_finite() && c.abs() <= DIVERGENCE_LIMIT) {
        Ok(State::from_vector(&x))
    } else {
        Err(PlantError::Divergence { state: [x[0], x[1], x[2], x[3]] })
    }
}

/// One RK4 step with zero-order hold on the control.
///
/// Fails with [`PlantError::Divergence`] if the result is non-finite or leaves
/// the `DIVERGENCE_LIMIT` box.
pub fn step(s: &State, c: &Control, dt: f64) -> Result<State, PlantError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PlantError::InvalidStep(dt));
    }
    let x = s.to_vector();
    let k1 = dynamics_vec(&x, c);
    let k2 = dynamics_vec(&(x + k1 * (0.5 * dt)), c);
    let k3 = dynamics_vec(&(x + k2 * (0.5 * dt)), c);
    let k4 = dynamics_vec(&(x + k3 * dt), c);
    check(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Sensitivities of one RK4 step: `(d x_next / d x, d x_next / d u)`.
pub fn step_jacobians(s: &State, c: &Control, dt: f64) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let x = s.to_vector();
    let b = dynamics_control_jacobian();
    let eye = Matrix4::<f64>::identity();

    let k1 = dynamics_vec(&x, c);
    let a1 = dynamics_state_jacobian(s);
    let (k1x, k1u) = (a1, b);

    let x2 = x + k1 * (0.5 * dt);
    let k2 = dynamics_vec(&x2, c);
    let a2 = dynamics_state_jacobian(&State::from_vector(&x2));
    let k2x = a2 * (eye + k1x * (0.5 * dt));
    let k2u = a2 * k1u * (0.5 * dt) + b;

    let x3 = x + k2 * (0.5 * dt);
    let k3 = dynamics_vec(&x3, c);
    let a3 = dynamics_state_jacobian(&State::from_vector(&x3));
    let k3x = a3 * (eye + k2x * (0.5 * dt));
    let k3u = a3 * k2u * (0.5 * dt) + b;

    let x4 = x + k3 * dt;
    let a4 = dynamics_state_jacobian(&State::from_vector(&x4));
    let k4x = a4 * (eye + k3x * dt);
    let k4u = a4 * k3u * dt + b;

    let jx = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let ju = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0);
    (jx, ju)
}

/// A fixed-step state/control record: `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn new(dt: f64, start: State) -> Self {
        assert!(dt > 0.0, "trajectory step must be positive");
        Self { dt, states: vec![start], controls: Vec::new() }
    }

    pub fn push(&mut self, control: Control, next: State) {
        self.controls.push(control);
        self.states.push(next);
    }

    /// Number of applied controls.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn last_state(&self) -> State {
        *self.states.last().expect("trajectory always holds its start state")
    }

    /// Keeps the first `steps` controls and the `steps + 1` states they span.
    pub fn truncate(&mut self, steps: usize) {
        self.controls.truncate(steps);
        self.states.truncate(steps + 1);
    }

    pub fn is_consistent(&self) -> bool {
        self.dt > 0.0 && self.states.len() == self.controls.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    InsideBounds,
    OutsideBounds,
}

/// How a batch of simulations picks its start regime by simulation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeMix {
    Inside,
    Outside,
    /// Even indices start inside the bounds, odd indices outside.
    Mixed,
}

impl RegimeMix {
    pub fn regime_for(self, index: usize) -> Regime {
        match self {
            RegimeMix::Inside => Regime::InsideBounds,
            RegimeMix::Outside => Regime::OutsideBounds,
            RegimeMix::Mixed if index.is_multiple_of(2) => Regime::InsideBounds,
            RegimeMix::Mixed => Regime::OutsideBounds,
        }
    }
}

/// Draws an initial state for `regime` from a seeded generator.
pub fn sample_initial_state(b: &Bounds, regime: Regime, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_initial_state_with(b, regime, DEFAULT_OUTSIDE_INFLATION, &mut rng)
}

/// Inside: uniform on the open state box. Outside: uniform on the box scaled by
/// `inflation` about its center, rejected until some component leaves the box.
pub fn sample_initial_state_with<R: Rng + ?Sized>(
    b: &Bounds,
    regime: Regime,
    inflation: f64,
    rng: &mut R,
) -> State {
    match regime {
        Regime::InsideBounds => loop {
            let s = uniform_in_box(b, 1.0, rng);
            // The open interval excludes the lower edge that `random_range` can hit.
            if b.contains(&s) {
                return s;
            }
        },
        Regime::OutsideBounds => {
            assert!(inflation > 1.0, "outside sampling needs inflation > 1, got {inflation}");
            loop {
                let s = uniform_in_box(b, inflation, rng);
                if !b.contains(&s) {
                    return s;
                }
            }
        }
    }
}

fn uniform_in_box<R: Rng + ?Sized>(b: &Bounds, scale: f64, rng: &mut R) -> State {
    let mut a = [0.0; 4];
    for (i, c) in a.iter_mut().enumerate() {
        let center = 0.5 * (b.state_low[i] + b.state_high[i]);
        let half = 0.5 * (b.state_high[i] - b.state_low[i]) * scale;
        *c = rng.random_range(center - half..center + half);
    }
    State::from_array(a)
}
