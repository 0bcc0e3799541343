use criterion::{criterion_group, criterion_main, Criterion};
use norml_bench::{log_prob_tape, point_rollouts, point_setup};
use norml_core::diffgraph::{grad_of_grad, row};
use norml_core::envs::{CartpoleTask, PointTask};
use norml_core::meta::{inner_adapt_norml, iteration_tasks, meta_gradient};
use norml_core::rollout::{collect, strip_rewards};
use norml_core::{AlgoVariant, EnvKind, MetaConfig, MetaParams, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn autodiff(c: &mut Criterion) {
    let (_, params) = point_setup();
    let trajs = point_rollouts(&params, 25);
    let (tape, out, theta) = log_prob_tape(&params, &trajs);
    c.bench_function("tape_gradient_250x2804", |b| {
        b.iter(|| tape.gradient(out, &[theta]).unwrap())
    });
    let v = row(&vec![1e-3; params.theta.len()]);
    c.bench_function("hvp_250x2804", |b| {
        b.iter(|| grad_of_grad(&tape, out, &[theta], &[theta], std::slice::from_ref(&v)).unwrap())
    });
}

fn rollouts(c: &mut Criterion) {
    let (_, params) = point_setup();
    let task = Task::Point(PointTask { phi: 0.5 });
    c.bench_function("collect_point_k25", |b| {
        b.iter(|| collect(&params.theta, EnvKind::PointShaped, task, 25, 10, 3).unwrap())
    });
    let config = MetaConfig::for_env(EnvKind::Cartpole);
    let cart = MetaParams::init(
        &config,
        AlgoVariant::Norml,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let task = Task::Cartpole(CartpoleTask { delta: 0.05 });
    c.bench_function("collect_cartpole_k5", |b| {
        b.iter(|| collect(&cart.theta, EnvKind::Cartpole, task, 5, 500, 3).unwrap())
    });
}

fn meta(c: &mut Criterion) {
    let (config, params) = point_setup();
    let set = strip_rewards(&point_rollouts(&params, 25));
    c.bench_function("inner_adapt_norml_point", |b| {
        b.iter(|| {
            inner_adapt_norml(
                &params.theta,
                Some(&params.theta_offset),
                &params.alpha,
                &params.psi,
                &set,
                config.inner_reduction,
            )
            .unwrap()
        })
    });
    let tasks = iteration_tasks(&config, 0, 0);
    let mut group = c.benchmark_group("meta_gradient_point");
    group.sample_size(10);
    for variant in [AlgoVariant::Norml, AlgoVariant::Maml] {
        group.bench_function(variant.name(), |b| {
            b.iter(|| meta_gradient(&params, variant, &config, &tasks, 0, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, autodiff, rollouts, meta);
criterion_main!(benches);
