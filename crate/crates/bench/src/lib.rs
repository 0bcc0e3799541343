//! Shared fixtures for the criterion benches.

use norml_core::diffgraph::{row, Graph, Tape, Var};
use norml_core::envs::PointTask;
use norml_core::meta::MetaParams;
use norml_core::netcore::log_prob_graph;
use norml_core::rollout::{collect, strip_rewards, Trajectory};
use norml_core::{AlgoVariant, EnvKind, MetaConfig, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default point-agent config and freshly initialized NoRML parameters.
pub fn point_setup() -> (MetaConfig, MetaParams) {
    let config = MetaConfig::for_env(EnvKind::PointShaped);
    let params = MetaParams::init(
        &config,
        AlgoVariant::Norml,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .expect("init");
    (config, params)
}

pub fn point_rollouts(params: &MetaParams, k: usize) -> Vec<Trajectory> {
    collect(
        &params.theta,
        EnvKind::PointShaped,
        Task::Point(PointTask { phi: 1.0 }),
        k,
        10,
        1,
    )
    .expect("rollouts")
}

/// Tape of `sum_t log pi(a_t | s_t)` over `trajs`, with the policy vector
/// as its only input.
pub fn log_prob_tape(params: &MetaParams, trajs: &[Trajectory]) -> (Tape, Var, Var) {
    let (s, a, _) = strip_rewards(trajs).arrays();
    let mut g = Graph::new();
    let theta = g.input(row(&params.theta.flatten()));
    let s = g.constant(s);
    let a = g.constant(a);
    let lp = log_prob_graph(&mut g, theta, &params.theta.config, s, a);
    let total = g.sum(lp);
    (g.finish().expect("finite tape"), total, theta)
}
