//! Task distributions: a point agent whose actions are rotated by an unknown
//! angle, and cart-pole balancing with a biased pole-angle sensor.
//!
//! The point agent starts at the origin and moves toward the goal `(1, 0)`
//! inside the square `[-2, 2]^2`. The shaped variant pays the negative
//! distance to the goal over a fixed horizon of 10 steps; the sparse variant
//! pays -1 per step until the agent is within 0.1 of the goal or 100 steps
//! have passed.
//!
//! Cart-pole uses a continuous force, clipped to `[-10, 10]` N, and the
//! classic constants with semi-implicit Euler integration. Each task adds a
//! fixed bias to the observed pole angle; termination always uses the true
//! angle.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

pub const POINT_GOAL: [f64; 2] = [1.0, 0.0];
pub const POINT_BOUND: f64 = 2.0;
pub const POINT_SHAPED_HORIZON: usize = 10;
pub const POINT_SPARSE_HORIZON: usize = 100;
pub const POINT_GOAL_RADIUS: f64 = 0.1;

pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
/// Half the pole length, as in the classic formulation.
pub const POLE_LENGTH: f64 = 0.5;
pub const GRAVITY: f64 = 9.8;
pub const DT: f64 = 0.02;
pub const FORCE_LIMIT: f64 = 10.0;
pub const ANGLE_LIMIT: f64 = 12.0 * PI / 180.0;
pub const POSITION_LIMIT: f64 = 2.4;
pub const CARTPOLE_HORIZON: usize = 500;
pub const MAX_SENSOR_BIAS: f64 = 10.0 * PI / 180.0;
const CARTPOLE_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTask {
    pub phi: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointState {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartpoleTask {
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult<S> {
    pub next_state: S,
    pub reward: f64,
    pub done: bool,
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Rotates the clamped action by `phi`, adds it to the position and clips
/// to the square region.
pub fn point_step(s: PointState, a: [f64; 2], task: PointTask) -> PointState {
    let (dx, dy) = (clamp_unit(a[0]), clamp_unit(a[1]));
    let (sin, cos) = task.phi.sin_cos();
    PointState {
        x: (s.x + cos * dx - sin * dy).clamp(-POINT_BOUND, POINT_BOUND),
        y: (s.y + sin * dx + cos * dy).clamp(-POINT_BOUND, POINT_BOUND),
    }
}

pub fn point_goal_distance(s: PointState) -> f64 {
    (s.x - POINT_GOAL[0]).hypot(s.y - POINT_GOAL[1])
}

pub fn point_reward_shaped(s_next: PointState) -> f64 {
    -point_goal_distance(s_next)
}

/// One sparse-reward step. `step` counts the steps already taken in the
/// episode, so the 100th call has `step == 99`.
pub fn point_step_sparse(
    s: PointState,
    a: [f64; 2],
    task: PointTask,
    step: usize,
) -> StepResult<PointState> {
    let next_state = point_step(s, a, task);
    let done =
        point_goal_distance(next_state) <= POINT_GOAL_RADIUS || step + 1 >= POINT_SPARSE_HORIZON;
    StepResult {
        next_state,
        reward: -1.0,
        done,
    }
}

pub fn cartpole_failed(s: &CartpoleState) -> bool {
    s.theta.abs() > ANGLE_LIMIT || s.x.abs() > POSITION_LIMIT
}

/// Integrates one step. `done` reports failure only; the episode cap is
/// applied by [`Env`].
pub fn cartpole_step(s: CartpoleState, force: f64) -> StepResult<CartpoleState> {
    let force = force.clamp(-FORCE_LIMIT, FORCE_LIMIT);
    let total_mass = CART_MASS + POLE_MASS;
    let pole_mass_length = POLE_MASS * POLE_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

    let x_dot = s.x_dot + DT * x_acc;
    let theta_dot = s.theta_dot + DT * theta_acc;
    let next_state = CartpoleState {
        x: s.x + DT * x_dot,
        x_dot,
        theta: s.theta + DT * theta_dot,
        theta_dot,
    };
    let done = cartpole_failed(&next_state);
    StepResult {
        next_state,
        reward: if done { 0.0 } else { 1.0 },
        done,
    }
}

pub fn cartpole_observe(s: &CartpoleState, task: CartpoleTask) -> [f64; 4] {
    [s.x, s.x_dot, s.theta + task.delta, s.theta_dot]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointShaped,
    PointSparse,
    Cartpole,
}

impl EnvKind {
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::PointShaped | EnvKind::PointSparse => 2,
            EnvKind::Cartpole => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::PointShaped | EnvKind::PointSparse => 2,
            EnvKind::Cartpole => 1,
        }
    }

    /// Maximum episode length.
    pub fn horizon(self) -> usize {
        match self {
            EnvKind::PointShaped => POINT_SHAPED_HORIZON,
            EnvKind::PointSparse => POINT_SPARSE_HORIZON,
            EnvKind::Cartpole => CARTPOLE_HORIZON,
        }
    }

    pub fn sample_task<R: Rng + ?Sized>(self, rng: &mut R) -> Task {
        match self {
            EnvKind::PointShaped | EnvKind::PointSparse => Task::Point(PointTask {
                phi: rng.random_range(0.0..2.0 * PI),
            }),
            EnvKind::Cartpole => Task::Cartpole(CartpoleTask {
                delta: rng.random_range(-MAX_SENSOR_BIAS..=MAX_SENSOR_BIAS),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Point(PointTask),
    Cartpole(CartpoleTask),
}

impl Task {
    /// The hidden task parameter: `phi` or `delta`, in radians.
    pub fn parameter(&self) -> f64 {
        match self {
            Task::Point(t) => t.phi,
            Task::Cartpole(t) => t.delta,
        }
    }

    pub fn for_kind(kind: EnvKind, parameter: f64) -> Task {
        match kind {
            EnvKind::PointShaped | EnvKind::PointSparse => {
                Task::Point(PointTask { phi: parameter })
            }
            EnvKind::Cartpole => Task::Cartpole(CartpoleTask { delta: parameter }),
        }
    }
}

pub fn sample_task<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Task {
    kind.sample_task(rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EnvState {
    Point(PointState),
    Cartpole(CartpoleState),
}

/// Observation, reward and termination flag of one [`Env::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// One episode of one task.
#[derive(Clone, Debug)]
pub struct Env {
    kind: EnvKind,
    task: Task,
    state: EnvState,
    steps: usize,
    done: bool,
}

impl Env {
    pub fn new(kind: EnvKind, task: Task) -> Result<Self> {
        let state = match (kind, task) {
            (EnvKind::PointShaped | EnvKind::PointSparse, Task::Point(_)) => {
                EnvState::Point(PointState::default())
            }
            (EnvKind::Cartpole, Task::Cartpole(_)) => EnvState::Cartpole(CartpoleState::default()),
            _ => {
                return Err(Error::Contract(format!(
                    "task {task:?} does not belong to {kind:?}"
                )));
            }
        };
        Ok(Self {
            kind,
            task,
            state,
            steps: 0,
            done: false,
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts a new episode and returns the first observation. The point
    /// agent always starts at the origin and draws nothing from `rng`.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = match self.state {
            EnvState::Point(_) => EnvState::Point(PointState::default()),
            EnvState::Cartpole(_) => {
                let mut draw = || rng.random_range(-CARTPOLE_INIT_RANGE..=CARTPOLE_INIT_RANGE);
                EnvState::Cartpole(CartpoleState {
                    x: draw(),
                    x_dot: draw(),
                    theta: draw(),
                    theta_dot: draw(),
                })
            }
        };
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    /// Starts a new episode from an exact simulator state (as returned by
    /// [`Env::raw_state`]).
    pub fn reset_to(&mut self, raw: &[f64]) -> Result<Vec<f64>> {
        self.state = match self.state {
            EnvState::Point(_) => match raw {
                [x, y] => EnvState::Point(PointState { x: *x, y: *y }),
                _ => return Err(shape_mismatch("point state", 2, raw.len())),
            },
            EnvState::Cartpole(_) => match raw {
                [x, x_dot, theta, theta_dot] => EnvState::Cartpole(CartpoleState {
                    x: *x,
                    x_dot: *x_dot,
                    theta: *theta,
                    theta_dot: *theta_dot,
                }),
                _ => return Err(shape_mismatch("cart-pole state", 4, raw.len())),
            },
        };
        self.steps = 0;
        self.done = false;
        Ok(self.observation())
    }

    /// True simulator state, without sensor bias.
    pub fn raw_state(&self) -> Vec<f64> {
        match self.state {
            EnvState::Point(s) => vec![s.x, s.y],
            EnvState::Cartpole(s) => vec![s.x, s.x_dot, s.theta, s.theta_dot],
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        match (self.state, self.task) {
            (EnvState::Point(s), _) => vec![s.x, s.y],
            (EnvState::Cartpole(s), Task::Cartpole(t)) => cartpole_observe(&s, t).to_vec(),
            (EnvState::Cartpole(_), Task::Point(_)) => unreachable!("checked in Env::new"),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if action.len() != self.kind.action_dim() {
            return Err(shape_mismatch(
                "action",
                self.kind.action_dim(),
                action.len(),
            ));
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::Contract(format!("non-finite action {action:?}")));
        }
        let (reward, done) = match (self.kind, &mut self.state, self.task) {
            (EnvKind::PointShaped, EnvState::Point(s), Task::Point(t)) => {
                *s = point_step(*s, [action[0], action[1]], t);
                (
                    point_reward_shaped(*s),
                    self.steps + 1 >= POINT_SHAPED_HORIZON,
                )
            }
            (EnvKind::PointSparse, EnvState::Point(s), Task::Point(t)) => {
                let r = point_step_sparse(*s, [action[0], action[1]], t, self.steps);
                *s = r.next_state;
                (r.reward, r.done)
            }
            (EnvKind::Cartpole, EnvState::Cartpole(s), _) => {
                let r = cartpole_step(*s, action[0]);
                *s = r.next_state;
                (r.reward, r.done || self.steps + 1 >= CARTPOLE_HORIZON)
            }
            _ => unreachable!("checked in Env::new"),
        };
        self.steps += 1;
        self.done = done;
        Ok(Step {
            observation: self.observation(),
            reward,
            done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn env_rejects_foreign_task() {
        assert!(Env::new(EnvKind::Cartpole, Task::Point(PointTask { phi: 0.0 })).is_err());
    }

    #[test]
    fn shaped_episode_has_fixed_horizon() {
        let mut env = Env::new(EnvKind::PointShaped, Task::Point(PointTask { phi: 0.0 })).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        for t in 0..10 {
            let step = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(step.done, t == 9);
            assert_eq!(step.reward, -1.0);
        }
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn step_rejects_nan_action() {
        let mut env = Env::new(EnvKind::PointSparse, Task::Point(PointTask { phi: 0.0 })).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(env.step(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn task_serde_is_tagged() {
        let json = serde_json::to_string(&Task::Cartpole(CartpoleTask { delta: 0.1 })).unwrap();
        assert_eq!(json, r#"{"kind":"cartpole","delta":0.1}"#);
        assert_eq!(
            serde_json::to_string(&EnvKind::PointSparse).unwrap(),
            r#""point_sparse""#
        );
    }
}
