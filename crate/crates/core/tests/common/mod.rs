//! Hand-written oracle for the meta-gradient on a 1-hidden-unit fixture,
//! shared by the unit and acceptance targets.
#![allow(dead_code)]

use norml_core::advantage_est::batch_advantages;
use norml_core::envs::{EnvKind, PointTask, Task};
use norml_core::meta::{
    clipped_surrogate, meta_gradient, AlgoVariant, InnerReduction, MetaConfig, MetaParams,
    OuterBatch,
};
use norml_core::rollout::{strip_rewards, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI_HALF: f64 = 0.918_938_533_204_672_7;

/// 1-hidden-unit policy and advantage net on the point agent, K=2, H=3.
pub fn tiny_config() -> MetaConfig {
    MetaConfig {
        rollouts: 2,
        tasks_per_iteration: 2,
        policy_hidden: vec![1],
        advantage_hidden: vec![1],
        alpha_init: 0.05,
        log_std_init: -0.3,
        max_steps: Some(3),
        ..MetaConfig::for_env(EnvKind::PointShaped)
    }
}

pub fn tiny_params(config: &MetaConfig, variant: AlgoVariant, seed: u64) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MetaParams::init(config, variant, &mut rng).unwrap();
    for x in p.theta.theta_mu.iter_mut() {
        *x = rng.random_range(-0.8..0.8);
    }
    for x in p.theta_offset.iter_mut() {
        *x = if variant.uses_offset() {
            rng.random_range(-0.1..0.1)
        } else {
            0.0
        };
    }
    if variant.adapts() {
        for x in p.alpha.iter_mut() {
            *x = rng.random_range(0.02..0.08);
        }
    }
    for x in p.psi.psi.iter_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    // keep the hidden ReLU active on the fixture so finite differences see a smooth function
    p.psi.psi[6] = 2.0;
    p
}

pub fn tasks() -> Vec<Task> {
    vec![
        Task::Point(PointTask { phi: 0.4 }),
        Task::Point(PointTask { phi: 2.9 }),
    ]
}

/// Hand-written 1-hidden-unit Gaussian policy on 2-D states and actions.
/// Layout: w1[2], b1, w2[2], b2[2], log_std[2].
pub fn oracle_log_prob_and_grad(th: &[f64], s: &[f64], a: &[f64]) -> (f64, [f64; 9]) {
    let pre = th[0] * s[0] + th[1] * s[1] + th[2];
    let h = pre.tanh();
    let mut lp = 0.0;
    let mut g = [0.0; 9];
    let mut dh = 0.0;
    for d in 0..2 {
        let mu = th[3 + d] * h + th[5 + d];
        let ls = th[7 + d];
        let z = (a[d] - mu) * (-ls).exp();
        lp += -0.5 * z * z - ls - LN_2PI_HALF;
        let dmu = z * (-ls).exp();
        g[3 + d] = dmu * h;
        g[5 + d] = dmu;
        g[7 + d] = z * z - 1.0;
        dh += dmu * th[3 + d];
    }
    let dpre = dh * (1.0 - h * h);
    g[0] = dpre * s[0];
    g[1] = dpre * s[1];
    g[2] = dpre;
    (lp, g)
}

/// ReLU net [6, 1, 1]: w[6], b, v, c.
pub fn oracle_advantage(psi: &[f64], x: &[f64]) -> f64 {
    let pre: f64 = (0..6).map(|i| psi[i] * x[i]).sum::<f64>() + psi[6];
    pre.max(0.0) * psi[7] + psi[8]
}

pub struct OracleTask {
    /// (s, a, s') of the meta rollouts and their observed advantages.
    train: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    observed: Vec<f64>,
    /// (s, a, behavior log-prob, standardized advantage) of the test rollouts.
    test: Vec<(Vec<f64>, Vec<f64>, f64, f64)>,
}

pub fn oracle_task(train: &[Trajectory], test: &[Trajectory], config: &MetaConfig) -> OracleTask {
    let set = strip_rewards(train);
    let outer = OuterBatch::new(test, config.gamma, config.horizon()).unwrap();
    let mut t = Vec::new();
    let mut n = 0;
    for traj in test {
        for step in 0..traj.len() {
            t.push((
                traj.states[step].clone(),
                traj.actions[step].clone(),
                traj.log_probs[step],
                outer.advantages[n],
            ));
            n += 1;
        }
    }
    OracleTask {
        train: set
            .transitions
            .iter()
            .map(|tr| (tr.state.clone(), tr.action.clone(), tr.next_state.clone()))
            .collect(),
        // domain randomization collects no meta rollouts
        observed: if train.is_empty() {
            Vec::new()
        } else {
            batch_advantages(train, config.gamma, config.horizon()).unwrap()
        },
        test: t,
    }
}

/// Sum over tasks of the clipped-surrogate loss after one adaptation step,
/// as a function of the flat stack [theta(9), offset(9), alpha(9), psi(9)].
pub fn oracle_meta_loss(
    stack: &[f64],
    variant: AlgoVariant,
    tasks: &[OracleTask],
    eps: f64,
    mean: bool,
) -> f64 {
    let (theta, rest) = stack.split_at(9);
    let (offset, rest) = rest.split_at(9);
    let (alpha, psi) = rest.split_at(9);
    let mut total = 0.0;
    for task in tasks {
        let mut theta_i = theta.to_vec();
        if variant.adapts() {
            let mut grad = [0.0; 9];
            for (n, (s, a, s2)) in task.train.iter().enumerate() {
                let w = if variant.uses_laf() {
                    let x: Vec<f64> = s.iter().chain(a).chain(s2).copied().collect();
                    oracle_advantage(psi, &x)
                } else {
                    task.observed[n]
                };
                let (_, g) = oracle_log_prob_and_grad(theta, s, a);
                for i in 0..9 {
                    grad[i] += w * g[i];
                }
            }
            let scale = if mean {
                1.0 / task.train.len() as f64
            } else {
                1.0
            };
            for i in 0..9 {
                let off = if variant.uses_offset() {
                    offset[i]
                } else {
                    0.0
                };
                theta_i[i] = theta[i] + off + alpha[i] * scale * grad[i];
            }
        }
        let (ratios, advs): (Vec<f64>, Vec<f64>) = task
            .test
            .iter()
            .map(|(s, a, blp, adv)| {
                (
                    (oracle_log_prob_and_grad(&theta_i, s, a).0 - blp).exp(),
                    *adv,
                )
            })
            .unzip();
        total += clipped_surrogate(&ratios, &advs, eps);
    }
    total
}

pub fn check_meta_gradient_against_oracle(variant: AlgoVariant, reduction: InnerReduction) -> f64 {
    let config = MetaConfig {
        inner_reduction: reduction,
        ..tiny_config()
    };
    let mean = reduction == InnerReduction::Mean;
    let params = tiny_params(&config, variant, 21);
    assert_eq!(params.theta.len(), 9);
    assert_eq!(params.psi.psi.len(), 9);
    let mg = meta_gradient(&params, variant, &config, &tasks(), 5, 0).unwrap();
    let oracle_tasks: Vec<OracleTask> = mg
        .tasks
        .iter()
        .map(|r| oracle_task(&r.train, &r.test, &config))
        .collect();
    let stack = params.to_stack();
    let base = oracle_meta_loss(
        &stack,
        variant,
        &oracle_tasks,
        config.ppo.clip_epsilon,
        mean,
    );
    assert!(
        (base - mg.loss).abs() <= 1e-10 * base.abs().max(1.0),
        "{base} vs {}",
        mg.loss
    );

    let analytic = mg.grads.to_stack();
    let trainable = |i: usize| -> bool {
        match i / 9 {
            0 => true,
            1 => variant.uses_offset(),
            2 => variant.adapts(),
            _ => variant.uses_laf(),
        }
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = stack.clone();
    for i in 0..stack.len() {
        probe[i] = stack[i] + h;
        let plus = oracle_meta_loss(
            &probe,
            variant,
            &oracle_tasks,
            config.ppo.clip_epsilon,
            mean,
        );
        probe[i] = stack[i] - h;
        let minus = oracle_meta_loss(
            &probe,
            variant,
            &oracle_tasks,
            config.ppo.clip_epsilon,
            mean,
        );
        probe[i] = stack[i];
        let numeric = if trainable(i) {
            (plus - minus) / (2.0 * h)
        } else {
            0.0
        };
        // central differences carry ~1e-10 absolute roundoff, so tiny components are compared absolutely
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}
