//! Trajectory collection.
//!
//! Every rollout draws from its own ChaCha8 stream whose seed is derived
//! from a counter path such as `(master, iteration, task, phase, rollout)`.
//! Nothing depends on scheduling order, so serial and parallel collection
//! produce identical data.
//!
//! Trajectories serialize to JSON lines, one trajectory per line, with the
//! fields `init_state`, `states`, `actions`, `rewards` (or `null`) and
//! `log_probs`.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvKind, Task};
use crate::error::{Error, Result};
use crate::netcore::{forward_unchecked, sample_from_mean, PolicyParams};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a counter path into a seed. Distinct paths give unrelated seeds.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |h, &p| {
        splitmix64(h ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)))
    })
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// One episode. `states` holds observations, one more than `actions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// True simulator state at reset, for replay.
    pub init_state: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Option<Vec<f64>>,
    /// Log-probabilities of the actions under the behavior policy.
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum())
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.actions.len();
        let rewards_ok = self.rewards.as_ref().is_none_or(|r| r.len() == h);
        if self.states.len() != h + 1 || self.log_probs.len() != h || !rewards_ok {
            return Err(Error::Format(format!(
                "inconsistent trajectory lengths: {} states, {h} actions, {} log-probs",
                self.states.len(),
                self.log_probs.len()
            )));
        }
        Ok(())
    }
}

/// Runs `k` episodes of at most `horizon` steps. Rollout `r` draws from
/// `rng_for(seed, &[r])`.
pub fn collect(
    policy: &PolicyParams,
    kind: EnvKind,
    task: Task,
    k: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::Contract("at least one rollout is required".into()));
    }
    if policy.state_dim() != kind.state_dim() || policy.action_dim() != kind.action_dim() {
        return Err(Error::Contract(format!(
            "policy maps {} -> {} but {kind:?} needs {} -> {}",
            policy.state_dim(),
            policy.action_dim(),
            kind.state_dim(),
            kind.action_dim()
        )));
    }
    (0..k)
        .map(|r| {
            collect_one(policy, kind, task, horizon, rng_for(seed, &[r as u64])).map_err(|e| {
                Error::Rollout {
                    task: 0,
                    rollout: r,
                    message: e.to_string(),
                }
            })
        })
        .collect()
}

fn collect_one(
    policy: &PolicyParams,
    kind: EnvKind,
    task: Task,
    horizon: usize,
    mut rng: ChaCha8Rng,
) -> Result<Trajectory> {
    let mut env = Env::new(kind, task)?;
    let mut obs = env.reset(&mut rng);
    let init_state = env.raw_state();
    let mut traj = Trajectory {
        init_state,
        states: vec![obs.clone()],
        actions: Vec::with_capacity(horizon),
        rewards: Some(Vec::with_capacity(horizon)),
        log_probs: Vec::with_capacity(horizon),
    };
    let rewards = traj.rewards.as_mut().expect("just created");
    for _ in 0..horizon {
        let mean = forward_unchecked(&policy.theta_mu, &policy.config, &obs);
        let (action, lp) = sample_from_mean(&mean, &policy.theta_sigma, &mut rng);
        let step = env.step(&action)?;
        obs = step.observation;
        traj.states.push(obs.clone());
        traj.actions.push(action);
        rewards.push(step.reward);
        traj.log_probs.push(lp);
        if step.done {
            break;
        }
    }
    Ok(traj)
}

impl Error {
    /// Fills in the task index of a rollout error.
    pub fn in_task(self, task: usize) -> Error {
        match self {
            Error::Rollout {
                rollout, message, ..
            } => Error::Rollout {
                task,
                rollout,
                message,
            },
            other => other,
        }
    }
}

/// `(s_t, a_t, s_{t+1})` with its source.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub trajectory: usize,
    pub t: usize,
}

/// Reward-free view of a batch of trajectories. It has no field that could
/// hold a reward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionSet {
    pub transitions: Vec<Transition>,
}

impl TransitionSet {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `(states, actions, next_states)` stacked row by row.
    pub fn arrays(&self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let stack = |f: &dyn Fn(&Transition) -> &Vec<f64>| {
            let cols = self.transitions.first().map_or(0, |t| f(t).len());
            let flat: Vec<f64> = self
                .transitions
                .iter()
                .flat_map(|t| f(t).iter().copied())
                .collect();
            Array2::from_shape_vec((self.transitions.len(), cols), flat).expect("uniform widths")
        };
        (
            stack(&|t| &t.state),
            stack(&|t| &t.action),
            stack(&|t| &t.next_state),
        )
    }
}

pub fn strip_rewards(trajectories: &[Trajectory]) -> TransitionSet {
    let transitions = trajectories
        .iter()
        .enumerate()
        .flat_map(|(k, traj)| {
            traj.actions
                .iter()
                .enumerate()
                .map(move |(t, a)| Transition {
                    state: traj.states[t].clone(),
                    action: a.clone(),
                    next_state: traj.states[t + 1].clone(),
                    trajectory: k,
                    t,
                })
        })
        .collect();
    TransitionSet { transitions }
}

/// `(states, actions)` of every step, stacked in trajectory order.
pub fn state_action_arrays(trajectories: &[Trajectory]) -> (Array2<f64>, Array2<f64>) {
    let n: usize = trajectories.iter().map(Trajectory::len).sum();
    let sd = trajectories.first().map_or(0, |t| t.states[0].len());
    let ad = trajectories
        .iter()
        .find_map(|t| t.actions.first())
        .map_or(0, Vec::len);
    let states: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| t.states[..t.len()].iter().flatten().copied())
        .collect();
    let actions: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| t.actions.iter().flatten().copied())
        .collect();
    (
        Array2::from_shape_vec((n, sd), states).expect("uniform state width"),
        Array2::from_shape_vec((n, ad), actions).expect("uniform action width"),
    )
}

/// Re-simulates a trajectory from its initial state and checks every
/// observation (and reward, when recorded) bit for bit.
pub fn verify_replay(kind: EnvKind, task: Task, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    let mut env = Env::new(kind, task)?;
    let first = env.reset_to(&traj.init_state)?;
    if first != traj.states[0] {
        return Err(Error::Format("initial observation does not match".into()));
    }
    for (t, a) in traj.actions.iter().enumerate() {
        let step = env.step(a)?;
        if step.observation != traj.states[t + 1] {
            return Err(Error::Format(format!("observation mismatch at step {t}")));
        }
        if let Some(r) = &traj.rewards {
            if r[t].to_bits() != step.reward.to_bits() {
                return Err(Error::Format(format!("reward mismatch at step {t}")));
            }
        }
        if step.done && t + 1 != traj.len() {
            return Err(Error::Format(format!(
                "episode ended at step {t} but the trajectory continues"
            )));
        }
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(mut out: W, trajectories: &[Trajectory]) -> Result<()> {
    for traj in trajectories {
        serde_json::to_writer(&mut out, traj)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)?;
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}
