//! Meta-learning: inner adaptation rules, the clipped-surrogate meta
//! objective, exact meta-gradients, Adam, meta-training and fine-tuning.
//!
//! The adaptation step for every variant is
//!
//! ```text
//! theta_i = theta + theta_offset + alpha * grad_theta sum_D w_t log pi_theta(a_t | s_t)
//! ```
//!
//! where `w_t` is the learned advantage `A_psi(s_t, a_t, s_{t+1})` for the
//! NoRML variants that keep it and the observed advantage (return minus
//! fitted value) otherwise. `theta_offset` is absent for MAML and NoRML
//! without offset; domain randomization skips adaptation entirely.
//!
//! Given `v = dL/d(theta_i)` for the outer loss `L`, the meta-gradient
//! follows by the chain rule:
//!
//! - `dL/d theta = v + d/d theta <alpha * v, grad J>` (a Hessian-vector product),
//! - `dL/d theta_offset = v`,
//! - `dL/d alpha = v * grad J`,
//! - `dL/d psi = d/d psi <alpha * v, grad J>`.
//!
//! The trainable stack is laid out as `[theta_mu, theta_sigma, theta_offset,
//! alpha, psi]`.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage_est::{batch_advantages, standardize, DEFAULT_GAMMA};
use crate::diffgraph::{grad_of_grad, row, Graph, Var};
use crate::envs::{EnvKind, Task};
use crate::error::{shape_mismatch, Error, Result};
use crate::netcore::{
    advantage_graph, advantage_inputs, log_prob_graph, Activation, AdvantageParams, InitScheme,
    MlpConfig, PolicyParams,
};
use crate::rollout::{
    collect, derive_seed, rng_for, state_action_arrays, strip_rewards, Trajectory, TransitionSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgoVariant {
    #[serde(rename = "maml")]
    Maml,
    #[serde(rename = "norml")]
    Norml,
    #[serde(rename = "norml_no_offset")]
    NormlNoOffset,
    #[serde(rename = "norml_no_laf")]
    NormlNoLaf,
    #[serde(rename = "dr")]
    DomainRandomization,
}

impl AlgoVariant {
    pub const ALL: [AlgoVariant; 5] = [
        AlgoVariant::Norml,
        AlgoVariant::Maml,
        AlgoVariant::DomainRandomization,
        AlgoVariant::NormlNoOffset,
        AlgoVariant::NormlNoLaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgoVariant::Maml => "maml",
            AlgoVariant::Norml => "norml",
            AlgoVariant::NormlNoOffset => "norml_no_offset",
            AlgoVariant::NormlNoLaf => "norml_no_laf",
            AlgoVariant::DomainRandomization => "dr",
        }
    }

    pub fn adapts(self) -> bool {
        self != AlgoVariant::DomainRandomization
    }

    pub fn uses_offset(self) -> bool {
        matches!(self, AlgoVariant::Norml | AlgoVariant::NormlNoLaf)
    }

    /// Whether the inner step uses the learned advantage (and so never
    /// reads rewards).
    pub fn uses_laf(self) -> bool {
        matches!(self, AlgoVariant::Norml | AlgoVariant::NormlNoOffset)
    }
}

impl std::fmt::Display for AlgoVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AlgoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub epochs: usize,
}

/// How the inner objective aggregates its per-transition terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerReduction {
    Sum,
    /// Divides by the number of transitions, so `alpha` is independent of
    /// the batch size.
    #[default]
    Mean,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            epochs: 1,
        }
    }
}

/// Everything that shapes one meta-training run apart from the variant and
/// the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub env: EnvKind,
    pub iterations: usize,
    /// Rollouts per task, for adaptation and again for the outer objective.
    pub rollouts: usize,
    pub tasks_per_iteration: usize,
    pub policy_hidden: Vec<usize>,
    pub advantage_hidden: Vec<usize>,
    /// Outer (Adam) learning rate.
    pub beta: f64,
    pub alpha_init: f64,
    pub log_std_init: f64,
    pub gamma: f64,
    pub ppo: PpoConfig,
    /// Keep the Hessian-vector term of the meta-gradient.
    pub second_order: bool,
    #[serde(default)]
    pub inner_reduction: InnerReduction,
    pub policy_init: InitScheme,
    pub advantage_init: InitScheme,
    /// Caps episodes below the environment's own horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl MetaConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let base = Self {
            env,
            iterations: 300,
            rollouts: 25,
            tasks_per_iteration: 10,
            policy_hidden: vec![50, 50],
            advantage_hidden: vec![50, 50],
            beta: 4e-3,
            alpha_init: 0.4,
            log_std_init: -0.4,
            gamma: DEFAULT_GAMMA,
            ppo: PpoConfig::default(),
            second_order: true,
            inner_reduction: InnerReduction::Mean,
            policy_init: InitScheme::default(),
            advantage_init: InitScheme::FanInUniform {
                gain: 1.0,
                output_gain: 1.0,
            },
            max_steps: None,
        };
        match env {
            EnvKind::PointShaped | EnvKind::PointSparse => base,
            EnvKind::Cartpole => Self {
                iterations: 500,
                ..base
            },
        }
    }

    /// Episode length cap, also the `H` of the value features.
    pub fn horizon(&self) -> usize {
        self.max_steps
            .map_or(self.env.horizon(), |m| m.min(self.env.horizon()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.rollouts == 0 {
            return bad("rollouts", "must be positive".into());
        }
        if self.tasks_per_iteration == 0 {
            return bad("tasks_per_iteration", "must be positive".into());
        }
        if self.policy_hidden.is_empty() || self.policy_hidden.contains(&0) {
            return bad(
                "policy_hidden",
                "needs at least one positive layer size".into(),
            );
        }
        if self.advantage_hidden.is_empty() || self.advantage_hidden.contains(&0) {
            return bad(
                "advantage_hidden",
                "needs at least one positive layer size".into(),
            );
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad("beta", format!("must be positive, got {}", self.beta));
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init", "must be finite".into());
        }
        if !self.log_std_init.is_finite() {
            return bad("log_std_init", "must be finite".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.ppo.clip_epsilon > 0.0 && self.ppo.clip_epsilon < 1.0) {
            return bad(
                "ppo.clip_epsilon",
                format!("must lie in (0, 1), got {}", self.ppo.clip_epsilon),
            );
        }
        if self.ppo.epochs == 0 {
            return bad("ppo.epochs", "must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps", "must be positive".into());
        }
        Ok(())
    }

    pub fn policy_config(&self) -> MlpConfig {
        let mut sizes = vec![self.env.state_dim()];
        sizes.extend_from_slice(&self.policy_hidden);
        sizes.push(self.env.action_dim());
        MlpConfig {
            layer_sizes: sizes,
            activation: Activation::Tanh,
        }
    }
}

/// All meta-learned quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub theta: PolicyParams,
    pub theta_offset: Vec<f64>,
    pub alpha: Vec<f64>,
    pub psi: AdvantageParams,
    pub beta: f64,
}

/// Index ranges of the blocks in the flat trainable stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackLayout {
    pub theta_mu: Range<usize>,
    pub theta_sigma: Range<usize>,
    pub theta_offset: Range<usize>,
    pub alpha: Range<usize>,
    pub psi: Range<usize>,
}

impl StackLayout {
    pub fn theta(&self) -> Range<usize> {
        self.theta_mu.start..self.theta_sigma.end
    }

    pub fn len(&self) -> usize {
        self.psi.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MetaParams {
    pub fn init<R: Rng + ?Sized>(
        config: &MetaConfig,
        variant: AlgoVariant,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let theta = PolicyParams::new(
            config.policy_config(),
            config.log_std_init,
            rng,
            config.policy_init,
        );
        let psi = AdvantageParams::new(
            config.env.state_dim(),
            config.env.action_dim(),
            &config.advantage_hidden,
            rng,
            config.advantage_init,
        )?;
        let n = theta.len();
        let alpha_init = if variant.adapts() {
            config.alpha_init
        } else {
            0.0
        };
        Ok(Self {
            theta,
            theta_offset: vec![0.0; n],
            alpha: vec![alpha_init; n],
            psi,
            beta: config.beta,
        })
    }

    pub fn layout(&self) -> StackLayout {
        let mu = self.theta.theta_mu.len();
        let n = self.theta.len();
        StackLayout {
            theta_mu: 0..mu,
            theta_sigma: mu..n,
            theta_offset: n..2 * n,
            alpha: 2 * n..3 * n,
            psi: 3 * n..3 * n + self.psi.psi.len(),
        }
    }

    pub fn to_stack(&self) -> Vec<f64> {
        let mut s = self.theta.flatten();
        s.extend_from_slice(&self.theta_offset);
        s.extend_from_slice(&self.alpha);
        s.extend_from_slice(&self.psi.psi);
        s
    }

    pub fn set_stack(&mut self, stack: &[f64]) -> Result<()> {
        let l = self.layout();
        if stack.len() != l.len() {
            return Err(shape_mismatch("parameter stack", l.len(), stack.len()));
        }
        self.theta
            .theta_mu
            .copy_from_slice(&stack[l.theta_mu.clone()]);
        self.theta
            .theta_sigma
            .copy_from_slice(&stack[l.theta_sigma.clone()]);
        self.theta_offset
            .copy_from_slice(&stack[l.theta_offset.clone()]);
        self.alpha.copy_from_slice(&stack[l.alpha.clone()]);
        self.psi.psi.copy_from_slice(&stack[l.psi.clone()]);
        Ok(())
    }

    fn block_norms(&self) -> String {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        format!(
            "|theta_mu|={:.3e} |theta_sigma|={:.3e} |theta_offset|={:.3e} |alpha|={:.3e} |psi|={:.3e}",
            norm(&self.theta.theta_mu),
            norm(&self.theta.theta_sigma),
            norm(&self.theta_offset),
            norm(&self.alpha),
            norm(&self.psi.psi)
        )
    }
}

/// Gradients over the trainable stack, split by block.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGrads {
    pub theta: Vec<f64>,
    pub theta_offset: Vec<f64>,
    pub alpha: Vec<f64>,
    pub psi: Vec<f64>,
}

impl MetaGrads {
    pub fn zeros(params: &MetaParams) -> Self {
        let n = params.theta.len();
        Self {
            theta: vec![0.0; n],
            theta_offset: vec![0.0; n],
            alpha: vec![0.0; n],
            psi: vec![0.0; params.psi.psi.len()],
        }
    }

    pub fn to_stack(&self) -> Vec<f64> {
        let mut s = self.theta.clone();
        s.extend_from_slice(&self.theta_offset);
        s.extend_from_slice(&self.alpha);
        s.extend_from_slice(&self.psi);
        s
    }

    fn add_assign(&mut self, other: &MetaGrads) {
        for (a, b) in [
            (&mut self.theta, &other.theta),
            (&mut self.theta_offset, &other.theta_offset),
            (&mut self.alpha, &other.alpha),
            (&mut self.psi, &other.psi),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Per-sample weights of the inner policy-gradient sum.
#[derive(Clone, Copy, Debug)]
pub enum InnerWeights<'a> {
    /// `A_psi(s, a, s')` on the transitions.
    Learned(&'a AdvantageParams),
    /// Given values, one per transition.
    Given(&'a [f64]),
}

/// Inputs of one inner step, stacked row by row.
#[derive(Clone, Debug)]
pub struct InnerBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

impl InnerBatch {
    pub fn from_transitions(set: &TransitionSet) -> Self {
        let (states, actions, next_states) = set.arrays();
        Self {
            states,
            actions,
            next_states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A recorded inner objective `J = sum_t w_t log pi_theta(a_t | s_t)`.
struct InnerRecord {
    tape: crate::diffgraph::Tape,
    objective: Var,
    theta: Var,
    psi: Option<Var>,
    grad_j: Vec<f64>,
}

fn record_inner(
    theta: &PolicyParams,
    batch: &InnerBatch,
    weights: InnerWeights<'_>,
    reduction: InnerReduction,
) -> Result<InnerRecord> {
    if batch.is_empty() {
        return Err(Error::Contract(
            "inner step needs at least one transition".into(),
        ));
    }
    let mut g = Graph::new();
    let theta_var = g.input(row(&theta.flatten()));
    let (w, psi) = match weights {
        InnerWeights::Learned(adv) => {
            let psi = g.input(row(&adv.psi));
            let x = g.constant(advantage_inputs(
                &batch.states,
                &batch.actions,
                &batch.next_states,
            ));
            (advantage_graph(&mut g, psi, &adv.config, x), Some(psi))
        }
        InnerWeights::Given(values) => {
            if values.len() != batch.len() {
                return Err(shape_mismatch("inner weights", batch.len(), values.len()));
            }
            let col = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column");
            (g.constant(col), None)
        }
    };
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let lp = log_prob_graph(&mut g, theta_var, &theta.config, s, a);
    let objective = g.dot(lp, w);
    let objective = match reduction {
        InnerReduction::Sum => objective,
        InnerReduction::Mean => g.scale(objective, 1.0 / batch.len() as f64),
    };
    let tape = g.finish()?;
    let grad_j = tape
        .gradient_arrays(objective, &[theta_var])?
        .remove(0)
        .into_raw_vec_and_offset()
        .0;
    Ok(InnerRecord {
        tape,
        objective,
        theta: theta_var,
        psi,
        grad_j,
    })
}

fn adapted(theta: &[f64], offset: Option<&[f64]>, alpha: &[f64], grad_j: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| t + offset.map_or(0.0, |o| o[i]) + alpha[i] * grad_j[i])
        .collect()
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(shape_mismatch(context, expected, v.len()));
    }
    Ok(())
}

/// General inner step `theta + offset + alpha * grad J` with
/// `J = sum_t w_t log pi` (or its mean).
pub fn inner_adapt(
    theta: &PolicyParams,
    offset: Option<&[f64]>,
    alpha: &[f64],
    batch: &InnerBatch,
    weights: InnerWeights<'_>,
    reduction: InnerReduction,
) -> Result<Vec<f64>> {
    check_len("alpha", theta.len(), alpha)?;
    if let Some(o) = offset {
        check_len("theta_offset", theta.len(), o)?;
    }
    let rec = record_inner(theta, batch, weights, reduction)?;
    Ok(adapted(&theta.flatten(), offset, alpha, &rec.grad_j))
}

/// MAML step with observed advantages (return minus fitted value). Needs
/// rewards.
pub fn inner_adapt_maml(
    theta: &PolicyParams,
    alpha: &[f64],
    train: &[Trajectory],
    gamma: f64,
    horizon: usize,
    reduction: InnerReduction,
) -> Result<Vec<f64>> {
    let adv = batch_advantages(train, gamma, horizon)?;
    let batch = InnerBatch::from_transitions(&strip_rewards(train));
    inner_adapt(
        theta,
        None,
        alpha,
        &batch,
        InnerWeights::Given(&adv),
        reduction,
    )
}

/// NoRML step from reward-free transitions.
pub fn inner_adapt_norml(
    theta: &PolicyParams,
    theta_offset: Option<&[f64]>,
    alpha: &[f64],
    psi: &AdvantageParams,
    train: &TransitionSet,
    reduction: InnerReduction,
) -> Result<Vec<f64>> {
    let batch = InnerBatch::from_transitions(train);
    inner_adapt(
        theta,
        theta_offset,
        alpha,
        &batch,
        InnerWeights::Learned(psi),
        reduction,
    )
}

/// `-sum_t min(rho_t A_t, clip(rho_t, 1 - eps, 1 + eps) A_t)`.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], epsilon: f64) -> f64 {
    -ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a))
        .sum::<f64>()
}

/// Data for the outer objective of one task.
#[derive(Clone, Debug)]
pub struct OuterBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub behavior_log_probs: Vec<f64>,
    /// Standardized observed advantages.
    pub advantages: Vec<f64>,
}

impl OuterBatch {
    pub fn new(test: &[Trajectory], gamma: f64, horizon: usize) -> Result<Self> {
        let (states, actions) = state_action_arrays(test);
        let advantages = standardize(&batch_advantages(test, gamma, horizon)?);
        let behavior_log_probs = test
            .iter()
            .flat_map(|t| t.log_probs.iter().copied())
            .collect();
        Ok(Self {
            states,
            actions,
            behavior_log_probs,
            advantages,
        })
    }
}

fn record_outer(
    g: &mut Graph,
    theta_i: Var,
    config: &MlpConfig,
    batch: &OuterBatch,
    epsilon: f64,
) -> Var {
    let n = batch.advantages.len();
    let s = g.constant(batch.states.clone());
    let a = g.constant(batch.actions.clone());
    let lp = log_prob_graph(g, theta_i, config, s, a);
    let behavior = g.constant(
        Array2::from_shape_vec((n, 1), batch.behavior_log_probs.clone()).expect("column"),
    );
    let adv = g.constant(Array2::from_shape_vec((n, 1), batch.advantages.clone()).expect("column"));
    let diff = g.sub(lp, behavior);
    let ratio = g.exp(diff);
    let surr = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let surr_clipped = g.mul(clipped, adv);
    let m = g.min(surr, surr_clipped);
    let total = g.sum(m);
    g.neg(total)
}

/// Clipped-surrogate loss of the adapted policy on its own test rollouts.
pub fn meta_objective(theta_i: &PolicyParams, batch: &OuterBatch, ppo: PpoConfig) -> Result<f64> {
    Ok(outer_value_and_grad(theta_i, batch, ppo)?.0)
}

/// Loss and `dL/d theta_i`.
pub fn outer_value_and_grad(
    theta_i: &PolicyParams,
    batch: &OuterBatch,
    ppo: PpoConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let t = g.input(row(&theta_i.flatten()));
    let loss = record_outer(&mut g, t, &theta_i.config, batch, ppo.clip_epsilon);
    let tape = g.finish()?;
    let grad = tape.gradient_arrays(loss, &[t])?.remove(0);
    Ok((tape.value(loss)[[0, 0]], grad.into_raw_vec_and_offset().0))
}

/// Counter-path phases for seeding.
pub mod phase {
    pub const TASKS: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const HELD_OUT_TASKS: u64 = 3;
    pub const HELD_OUT_ADAPT: u64 = 4;
    pub const HELD_OUT_EVAL: u64 = 5;
    pub const INIT: u64 = 6;
}

/// Data gathered for one task of a meta-batch.
#[derive(Clone, Debug)]
pub struct TaskReport {
    pub task: Task,
    /// Meta rollouts under `pi_theta`; empty for domain randomization.
    pub train: Vec<Trajectory>,
    /// Test rollouts under `pi_theta_i`.
    pub test: Vec<Trajectory>,
    pub theta_i: Vec<f64>,
    pub loss: f64,
    pub pre_return: f64,
    pub post_return: f64,
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grads: MetaGrads,
    pub loss: f64,
    pub tasks: Vec<TaskReport>,
}

fn mean_return(trajs: &[Trajectory]) -> f64 {
    trajs
        .iter()
        .map(|t| t.total_reward().unwrap_or(f64::NAN))
        .sum::<f64>()
        / trajs.len() as f64
}

/// Inner batch and weights source for a variant, from rollouts with rewards.
struct InnerData {
    batch: InnerBatch,
    observed: Option<Vec<f64>>,
}

fn inner_data(
    variant: AlgoVariant,
    train: &[Trajectory],
    config: &MetaConfig,
) -> Result<InnerData> {
    let batch = InnerBatch::from_transitions(&strip_rewards(train));
    let observed = if variant.uses_laf() {
        None
    } else {
        Some(batch_advantages(train, config.gamma, config.horizon())?)
    };
    Ok(InnerData { batch, observed })
}

fn weights_of<'a>(params: &'a MetaParams, data: &'a InnerData) -> InnerWeights<'a> {
    match &data.observed {
        Some(v) => InnerWeights::Given(v),
        None => InnerWeights::Learned(&params.psi),
    }
}

/// Chains `v = dL/d theta_i` back through a recorded inner step.
fn chain_inner(
    params: &MetaParams,
    variant: AlgoVariant,
    rec: &InnerRecord,
    v: &[f64],
    second_order: bool,
) -> Result<MetaGrads> {
    let mut grads = MetaGrads::zeros(params);
    grads.theta.copy_from_slice(v);
    if variant.uses_offset() {
        grads.theta_offset.copy_from_slice(v);
    }
    for ((a, vi), g) in grads.alpha.iter_mut().zip(v).zip(&rec.grad_j) {
        *a = vi * g;
    }
    let mut outer = Vec::new();
    if second_order {
        outer.push(rec.theta);
    }
    if let Some(psi) = rec.psi {
        outer.push(psi);
    }
    if !outer.is_empty() {
        let direction: Vec<f64> = v.iter().zip(&params.alpha).map(|(v, a)| v * a).collect();
        let terms = grad_of_grad(
            &rec.tape,
            rec.objective,
            &outer,
            &[rec.theta],
            &[row(&direction)],
        )?;
        let mut terms = terms.into_iter();
        if second_order {
            for (g, h) in grads
                .theta
                .iter_mut()
                .zip(terms.next().expect("theta term"))
            {
                *g += h;
            }
        }
        if rec.psi.is_some() {
            grads.psi = terms.next().expect("psi term").into_raw_vec_and_offset().0;
        }
    }
    Ok(grads)
}

/// Meta-gradient contribution of one task on fixed data.
pub fn task_gradient(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    train: &[Trajectory],
    test: &[Trajectory],
) -> Result<(MetaGrads, f64)> {
    let outer = OuterBatch::new(test, config.gamma, config.horizon())?;
    if !variant.adapts() {
        let (loss, v) = outer_value_and_grad(&params.theta, &outer, config.ppo)?;
        let mut grads = MetaGrads::zeros(params);
        grads.theta = v;
        return Ok((grads, loss));
    }
    let data = inner_data(variant, train, config)?;
    let rec = record_inner(
        &params.theta,
        &data.batch,
        weights_of(params, &data),
        config.inner_reduction,
    )?;
    finish_task_gradient(params, variant, config, &rec, &outer)
}

fn finish_task_gradient(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    rec: &InnerRecord,
    outer: &OuterBatch,
) -> Result<(MetaGrads, f64)> {
    let offset = variant
        .uses_offset()
        .then_some(params.theta_offset.as_slice());
    let theta_i = adapted(&params.theta.flatten(), offset, &params.alpha, &rec.grad_j);
    let policy_i = PolicyParams::from_flat(params.theta.config.clone(), &theta_i)?;
    let (loss, v) = outer_value_and_grad(&policy_i, outer, config.ppo)?;
    let grads = chain_inner(params, variant, rec, &v, config.second_order)?;
    Ok((grads, loss))
}

/// Seeds of the two rollout phases of one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSeeds {
    pub train: u64,
    pub test: u64,
}

impl TaskSeeds {
    pub fn for_iteration(master: u64, iteration: usize, task_index: usize) -> Self {
        Self {
            train: derive_seed(master, &[iteration as u64, task_index as u64, phase::TRAIN]),
            test: derive_seed(master, &[iteration as u64, task_index as u64, phase::TEST]),
        }
    }
}

/// Collects data for one task and returns its gradient contribution.
pub fn task_step(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    task: Task,
    seeds: TaskSeeds,
) -> Result<(MetaGrads, TaskReport)> {
    let (k, h, env) = (config.rollouts, config.horizon(), config.env);
    if !variant.adapts() {
        let test = collect(&params.theta, env, task, k, h, seeds.test)?;
        let (grads, loss) = task_gradient(params, variant, config, &[], &test)?;
        let ret = mean_return(&test);
        let report = TaskReport {
            task,
            train: Vec::new(),
            test,
            theta_i: params.theta.flatten(),
            loss,
            pre_return: ret,
            post_return: ret,
        };
        return Ok((grads, report));
    }
    let train = collect(&params.theta, env, task, k, h, seeds.train)?;
    let data = inner_data(variant, &train, config)?;
    let rec = record_inner(
        &params.theta,
        &data.batch,
        weights_of(params, &data),
        config.inner_reduction,
    )?;
    let offset = variant
        .uses_offset()
        .then_some(params.theta_offset.as_slice());
    let theta_i = adapted(&params.theta.flatten(), offset, &params.alpha, &rec.grad_j);
    let policy_i = PolicyParams::from_flat(params.theta.config.clone(), &theta_i)?;
    let test = collect(&policy_i, env, task, k, h, seeds.test)?;
    let outer = OuterBatch::new(&test, config.gamma, h)?;
    let (grads, loss) = finish_task_gradient(params, variant, config, &rec, &outer)?;
    let report = TaskReport {
        task,
        pre_return: mean_return(&train),
        post_return: mean_return(&test),
        train,
        test,
        theta_i,
        loss,
    };
    Ok((grads, report))
}

/// Summed meta-gradient over a batch of tasks. Tasks run in parallel; the
/// reduction follows task order.
pub fn meta_gradient(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    tasks: &[Task],
    master_seed: u64,
    iteration: usize,
) -> Result<MetaGradient> {
    let results: Vec<Result<(MetaGrads, TaskReport)>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            task_step(
                params,
                variant,
                config,
                *task,
                TaskSeeds::for_iteration(master_seed, iteration, i),
            )
            .map_err(|e| e.in_task(i))
        })
        .collect();
    let mut grads = MetaGrads::zeros(params);
    let mut loss = 0.0;
    let mut reports = Vec::with_capacity(tasks.len());
    for r in results {
        let (g, report) = r?;
        grads.add_assign(&g);
        loss += report.loss;
        reports.push(report);
    }
    Ok(MetaGradient {
        grads,
        loss,
        tasks: reports,
    })
}

/// Recomputes the summed gradient on data gathered earlier (later PPO
/// epochs).
fn regradient(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    reports: &[TaskReport],
) -> Result<MetaGrads> {
    let results: Vec<Result<MetaGrads>> = reports
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            task_gradient(params, variant, config, &r.train, &r.test)
                .map(|(g, _)| g)
                .map_err(|e| e.in_task(i))
        })
        .collect();
    let mut grads = MetaGrads::zeros(params);
    for g in results {
        grads.add_assign(&g?);
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update of `stack` against `grads` (descent).
pub fn adam_step(stack: &mut [f64], grads: &[f64], state: &mut AdamState, beta: f64) -> Result<()> {
    if grads.len() != stack.len() || state.m.len() != stack.len() || state.v.len() != stack.len() {
        return Err(shape_mismatch(
            "adam stack",
            stack.len(),
            (grads.len(), state.m.len(), state.v.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - AdamState::BETA1.powi(t);
    let c2 = 1.0 - AdamState::BETA2.powi(t);
    for i in 0..stack.len() {
        let g = grads[i];
        state.m[i] = AdamState::BETA1 * state.m[i] + (1.0 - AdamState::BETA1) * g;
        state.v[i] = AdamState::BETA2 * state.v[i] + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        stack[i] -= beta * m_hat / (v_hat.sqrt() + AdamState::EPSILON);
    }
    Ok(())
}

/// One row of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub pre_mean: f64,
    pub pre_std: f64,
    pub post_mean: f64,
    pub post_std: f64,
    pub seconds: f64,
    pub pre_returns: Vec<f64>,
    pub post_returns: Vec<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Tasks of one meta-iteration.
pub fn iteration_tasks(config: &MetaConfig, master_seed: u64, iteration: usize) -> Vec<Task> {
    let mut rng = rng_for(master_seed, &[iteration as u64, phase::TASKS]);
    (0..config.tasks_per_iteration)
        .map(|_| config.env.sample_task(&mut rng))
        .collect()
}

/// Result of [`meta_train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MetaParams,
    pub adam: AdamState,
    pub curve: Vec<CurveRecord>,
}

/// Meta-trains from a fresh initialization. The curve records, for every
/// iteration, the returns of the meta rollouts (pre) and test rollouts
/// (post) on that iteration's freshly sampled tasks, measured before the
/// update.
pub fn meta_train(config: &MetaConfig, variant: AlgoVariant, seed: u64) -> Result<TrainOutcome> {
    meta_train_with(config, variant, seed, |_| {})
}

pub fn meta_train_with(
    config: &MetaConfig,
    variant: AlgoVariant,
    seed: u64,
    mut on_record: impl FnMut(&CurveRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut init_rng = rng_for(seed, &[phase::INIT]);
    let params = MetaParams::init(config, variant, &mut init_rng)?;
    let adam = AdamState::new(params.layout().len());
    train_from(params, adam, config, variant, seed, 0, &mut on_record)
}

/// Continues training from `params` and `adam`, starting at iteration
/// `start`.
pub fn train_from(
    mut params: MetaParams,
    mut adam: AdamState,
    config: &MetaConfig,
    variant: AlgoVariant,
    seed: u64,
    start: usize,
    on_record: &mut dyn FnMut(&CurveRecord),
) -> Result<TrainOutcome> {
    let mut curve = Vec::new();
    let clock = Instant::now();
    let diverged = |iteration: usize, params: &MetaParams, why: String| Error::Diverged {
        iteration,
        detail: format!("{why}; {}", params.block_norms()),
    };
    for iteration in start..config.iterations {
        let tasks = iteration_tasks(config, seed, iteration);
        let mg = match meta_gradient(&params, variant, config, &tasks, seed, iteration) {
            Ok(mg) => mg,
            Err(e @ (Error::NumericDomain { .. } | Error::Rollout { .. })) => {
                return Err(diverged(iteration, &params, e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let pre: Vec<f64> = mg.tasks.iter().map(|t| t.pre_return).collect();
        let post: Vec<f64> = mg.tasks.iter().map(|t| t.post_return).collect();
        let mut grads = mg.grads;
        for epoch in 0..config.ppo.epochs {
            if epoch > 0 {
                grads = regradient(&params, variant, config, &mg.tasks)
                    .map_err(|e| diverged(iteration, &params, e.to_string()))?;
            }
            let g = grads.to_stack();
            if !g.iter().all(|x| x.is_finite()) {
                return Err(diverged(
                    iteration,
                    &params,
                    "non-finite meta-gradient".into(),
                ));
            }
            let mut stack = params.to_stack();
            adam_step(&mut stack, &g, &mut adam, params.beta)?;
            params.set_stack(&stack)?;
            if !stack.iter().all(|x| x.is_finite()) {
                return Err(diverged(iteration, &params, "non-finite parameters".into()));
            }
        }
        let (pre_mean, pre_std) = mean_std(&pre);
        let (post_mean, post_std) = mean_std(&post);
        let record = CurveRecord {
            iteration,
            pre_mean,
            pre_std,
            post_mean,
            post_std,
            seconds: clock.elapsed().as_secs_f64(),
            pre_returns: pre,
            post_returns: post,
        };
        on_record(&record);
        curve.push(record);
    }
    Ok(TrainOutcome {
        params,
        adam,
        curve,
    })
}

/// Adapts `params` to the task that produced `rollouts` (collected under
/// `pi_theta`). NoRML variants see only the reward-free transitions.
pub fn adapt(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    rollouts: &[Trajectory],
) -> Result<PolicyParams> {
    if !variant.adapts() {
        return Ok(params.theta.clone());
    }
    let offset = variant
        .uses_offset()
        .then_some(params.theta_offset.as_slice());
    let theta_i = if variant.uses_laf() {
        inner_adapt_norml(
            &params.theta,
            offset,
            &params.alpha,
            &params.psi,
            &strip_rewards(rollouts),
            config.inner_reduction,
        )?
    } else {
        let adv = batch_advantages(rollouts, config.gamma, config.horizon())?;
        let batch = InnerBatch::from_transitions(&strip_rewards(rollouts));
        inner_adapt(
            &params.theta,
            offset,
            &params.alpha,
            &batch,
            InnerWeights::Given(&adv),
            config.inner_reduction,
        )?
    };
    PolicyParams::from_flat(params.theta.config.clone(), &theta_i)
}

/// Collects `k` fresh meta rollouts on `task` and adapts to them.
pub fn fine_tune(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    task: Task,
    k: usize,
    seed: u64,
) -> Result<PolicyParams> {
    let rollouts = collect(&params.theta, config.env, task, k, config.horizon(), seed)?;
    adapt(params, variant, config, &rollouts)
}

/// On-disk form of trained parameters: a versioned header and named flat
/// arrays in stack order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: AlgoVariant,
    pub config: MetaConfig,
    pub seed: u64,
    pub iteration: usize,
    pub beta: f64,
    pub policy: MlpConfig,
    pub advantage: MlpConfig,
    pub arrays: Vec<NamedArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "norml-checkpoint";
const ARRAY_NAMES: [&str; 5] = ["theta_mu", "theta_sigma", "theta_offset", "alpha", "psi"];

impl Checkpoint {
    pub fn new(
        params: &MetaParams,
        variant: AlgoVariant,
        config: &MetaConfig,
        seed: u64,
        iteration: usize,
        adam: Option<AdamState>,
    ) -> Self {
        let blocks = [
            &params.theta.theta_mu,
            &params.theta.theta_sigma,
            &params.theta_offset,
            &params.alpha,
            &params.psi.psi,
        ];
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            variant,
            config: config.clone(),
            seed,
            iteration,
            beta: params.beta,
            policy: params.theta.config.clone(),
            advantage: params.psi.config.clone(),
            arrays: ARRAY_NAMES
                .iter()
                .zip(blocks)
                .map(|(name, values)| NamedArray {
                    name: (*name).into(),
                    values: values.clone(),
                })
                .collect(),
            adam,
        }
    }

    pub fn params(&self) -> Result<MetaParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::Format(format!(
                "expected {CHECKPOINT_FORMAT} v1, found {} v{}",
                self.format, self.version
            )));
        }
        let get = |name: &str| {
            self.arrays
                .iter()
                .find(|a| a.name == name)
                .map(|a| a.values.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks array `{name}`")))
        };
        let mut theta = get("theta_mu")?;
        theta.extend(get("theta_sigma")?);
        let theta = PolicyParams::from_flat(self.policy.clone(), &theta)
            .map_err(|e| Error::Format(e.to_string()))?;
        let psi = get("psi")?;
        if psi.len() != self.advantage.param_count() {
            return Err(Error::Format(
                "psi length does not match its network".into(),
            ));
        }
        let params = MetaParams {
            theta_offset: get("theta_offset")?,
            alpha: get("alpha")?,
            psi: AdvantageParams {
                state_dim: self.config.env.state_dim(),
                action_dim: self.config.env.action_dim(),
                config: self.advantage.clone(),
                psi,
            },
            beta: self.beta,
            theta,
        };
        if params.theta_offset.len() != params.theta.len()
            || params.alpha.len() != params.theta.len()
        {
            return Err(Error::Format(
                "offset or alpha length does not match theta".into(),
            ));
        }
        Ok(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
