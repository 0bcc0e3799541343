//! Reward-based advantages: discounted returns minus a per-task linear
//! value baseline.
//!
//! The baseline regresses discounted returns on the features
//! `[1, s, s*s, t/H, (t/H)^2, (t/H)^3]` with a small ridge term, where `H`
//! is the environment's maximum episode length.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const RIDGE: f64 = 1e-5;
const STD_FLOOR: f64 = 1e-8;

/// `returns[t] = sum_{t' >= t} gamma^(t' - t) r_t'`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn feature_dim(state_dim: usize) -> usize {
    2 * state_dim + 4
}

pub fn features(s: &[f64], t: usize, horizon: usize) -> Vec<f64> {
    let tau = t as f64 / horizon as f64;
    let mut f = Vec::with_capacity(feature_dim(s.len()));
    f.push(1.0);
    f.extend_from_slice(s);
    f.extend(s.iter().map(|x| x * x));
    f.extend([tau, tau * tau, tau * tau * tau]);
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFit {
    pub coefficients: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

impl ValueFit {
    /// The all-zero predictor.
    pub fn zero(state_dim: usize, gamma: f64, horizon: usize) -> Self {
        Self {
            coefficients: vec![0.0; feature_dim(state_dim)],
            gamma,
            horizon,
        }
    }

    pub fn predict(&self, s: &[f64], t: usize) -> f64 {
        features(s, t, self.horizon)
            .iter()
            .zip(&self.coefficients)
            .map(|(f, c)| f * c)
            .sum()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    Ok(())
}

fn rewards_of(traj: &Trajectory) -> Result<&[f64]> {
    traj.rewards
        .as_deref()
        .ok_or_else(|| Error::Contract("trajectory carries no rewards".into()))
}

/// Ridge least squares of discounted returns on the feature map.
pub fn fit_value(trajectories: &[Trajectory], gamma: f64, horizon: usize) -> Result<ValueFit> {
    check_gamma(gamma)?;
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Contract("value fit needs at least one trajectory".into()))?;
    let dim = feature_dim(first.states[0].len());
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for traj in trajectories {
        let returns = discounted_returns(rewards_of(traj)?, gamma);
        for (t, g) in returns.iter().enumerate() {
            let f = DVector::from_vec(features(&traj.states[t], t, horizon));
            gram.ger(1.0, &f, &f, 1.0);
            rhs.axpy(*g, &f, 1.0);
        }
    }
    let mut ridge = RIDGE;
    loop {
        let mut a = gram.clone();
        for i in 0..dim {
            a[(i, i)] += ridge;
        }
        if let Some(chol) = a.cholesky() {
            let c = chol.solve(&rhs);
            if c.iter().all(|x| x.is_finite()) {
                return Ok(ValueFit {
                    coefficients: c.iter().copied().collect(),
                    gamma,
                    horizon,
                });
            }
        }
        ridge *= 10.0;
        if !ridge.is_finite() || !gram.iter().all(|x| x.is_finite()) {
            return Err(Error::Contract("value fit received non-finite data".into()));
        }
    }
}

/// Discounted return minus the fitted value at every step.
pub fn observed_advantage(traj: &Trajectory, fit: &ValueFit) -> Result<Vec<f64>> {
    let returns = discounted_returns(rewards_of(traj)?, fit.gamma);
    Ok(returns
        .iter()
        .enumerate()
        .map(|(t, g)| g - fit.predict(&traj.states[t], t))
        .collect())
}

/// Fits the baseline on `trajectories` and returns all advantages in
/// trajectory order.
pub fn batch_advantages(
    trajectories: &[Trajectory],
    gamma: f64,
    horizon: usize,
) -> Result<Vec<f64>> {
    let fit = fit_value(trajectories, gamma, horizon)?;
    let mut out = Vec::new();
    for traj in trajectories {
        out.extend(observed_advantage(traj, &fit)?);
    }
    Ok(out)
}

/// Zero mean, unit (population) standard deviation. Fewer than two values
/// are returned unchanged; a constant list maps to zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.len() < 2 {
        return values.to_vec();
    }
    if values.iter().all(|v| *v == values[0]) {
        return vec![0.0; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    values.iter().map(|v| (v - mean) / std).collect()
}
