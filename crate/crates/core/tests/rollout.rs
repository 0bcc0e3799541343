use norml_core::envs::{CartpoleTask, EnvKind, PointTask, Task};
use norml_core::netcore::{Activation, InitScheme, MlpConfig, PolicyParams};
use norml_core::rollout::{
    collect, derive_seed, read_jsonl, state_action_arrays, strip_rewards, verify_replay,
    write_jsonl,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point_policy(log_std: f64, seed: u64) -> PolicyParams {
    let config = MlpConfig::new(vec![2, 50, 50, 2], Activation::Tanh).unwrap();
    PolicyParams::new(
        config,
        log_std,
        &mut ChaCha8Rng::seed_from_u64(seed),
        InitScheme::default(),
    )
}

/// Zero network whose output bias makes the mean action `(dx, 0)` everywhere.
fn constant_policy(dx: f64) -> PolicyParams {
    let config = MlpConfig::new(vec![2, 3, 2], Activation::Tanh).unwrap();
    let mut theta = vec![0.0; config.param_count() + 2];
    let out_bias = config.param_count() - 2;
    theta[out_bias] = dx;
    theta[config.param_count()] = -20.0;
    theta[config.param_count() + 1] = -20.0;
    PolicyParams::from_flat(config, &theta).unwrap()
}

fn point(phi: f64) -> Task {
    Task::Point(PointTask { phi })
}

#[test]
fn shaped_batch_has_fixed_lengths() {
    let trajs = collect(
        &point_policy(0.0, 1),
        EnvKind::PointShaped,
        point(0.7),
        25,
        10,
        42,
    )
    .unwrap();
    assert_eq!(trajs.len(), 25);
    for t in &trajs {
        assert_eq!(t.len(), 10);
        assert_eq!(t.states.len(), 11);
        assert_eq!(t.rewards.as_ref().unwrap().len(), 10);
        assert_eq!(t.log_probs.len(), 10);
    }
    assert_eq!(strip_rewards(&trajs).len(), 250);
}

#[test]
fn deterministic_policy_repeats_exactly() {
    let policy = point_policy(-20.0, 2);
    let a = collect(&policy, EnvKind::PointShaped, point(0.0), 1, 10, 7).unwrap();
    let b = collect(&policy, EnvKind::PointShaped, point(0.0), 1, 10, 7).unwrap();
    assert_eq!(a, b);
}

#[test]
fn straight_line_policy_reaches_sparse_goal_early() {
    // 0.25 per step puts the agent exactly at (1, 0) after four steps
    let trajs = collect(
        &constant_policy(0.25),
        EnvKind::PointSparse,
        point(0.0),
        1,
        100,
        3,
    )
    .unwrap();
    let t = &trajs[0];
    assert_eq!(t.len(), 4);
    assert_eq!(*t.rewards.as_ref().unwrap().last().unwrap(), -1.0);
    assert_eq!(t.total_reward(), Some(-4.0));
}

#[test]
fn early_termination_sets_transition_count() {
    let trajs = collect(
        &constant_policy(1.0 / 7.0),
        EnvKind::PointSparse,
        point(0.0),
        1,
        100,
        3,
    )
    .unwrap();
    assert_eq!(trajs[0].len(), 7);
    let set = strip_rewards(&trajs);
    assert_eq!(set.len(), 7);
    assert_eq!(set.transitions.last().unwrap().t, 6);
}

#[test]
fn empty_input_strips_to_empty_set() {
    assert!(strip_rewards(&[]).is_empty());
}

#[test]
fn transitions_preserve_order() {
    let trajs = collect(
        &point_policy(0.0, 4),
        EnvKind::PointShaped,
        point(1.0),
        3,
        10,
        5,
    )
    .unwrap();
    let set = strip_rewards(&trajs);
    let (s, a, s2) = set.arrays();
    let (s_ref, a_ref) = state_action_arrays(&trajs);
    assert_eq!(s, s_ref);
    assert_eq!(a, a_ref);
    for (i, tr) in set.transitions.iter().enumerate() {
        assert_eq!((tr.trajectory, tr.t), (i / 10, i % 10));
        assert_eq!(s2.row(i).to_vec(), trajs[i / 10].states[i % 10 + 1]);
    }
}

#[test]
fn rollouts_are_independent_of_batch_size() {
    let policy = point_policy(-0.5, 5);
    let few = collect(&policy, EnvKind::PointShaped, point(2.0), 3, 10, 11).unwrap();
    let many = collect(&policy, EnvKind::PointShaped, point(2.0), 8, 10, 11).unwrap();
    assert_eq!(few[..], many[..3]);
    assert_ne!(many[0], many[1]);
}

#[test]
fn replay_verifies_every_transition() {
    let cases = [
        (EnvKind::PointShaped, point(0.3)),
        (EnvKind::PointSparse, point(4.0)),
        (
            EnvKind::Cartpole,
            Task::Cartpole(CartpoleTask { delta: 0.1 }),
        ),
    ];
    for (kind, task) in cases {
        let config = MlpConfig::new(
            vec![kind.state_dim(), 8, kind.action_dim()],
            Activation::Tanh,
        )
        .unwrap();
        let policy = PolicyParams::new(
            config,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(9),
            InitScheme::default(),
        );
        let trajs = collect(&policy, kind, task, 4, kind.horizon(), 13).unwrap();
        for t in &trajs {
            verify_replay(kind, task, t).unwrap();
        }
        let mut bad = trajs[0].clone();
        bad.states[1][0] += 1e-12;
        assert!(verify_replay(kind, task, &bad).is_err());
    }
}

#[test]
fn mismatched_policy_is_rejected() {
    let config = MlpConfig::new(vec![4, 3, 1], Activation::Tanh).unwrap();
    let policy = PolicyParams::new(
        config,
        0.0,
        &mut ChaCha8Rng::seed_from_u64(0),
        InitScheme::default(),
    );
    assert!(collect(&policy, EnvKind::PointShaped, point(0.0), 1, 10, 0).is_err());
    assert!(collect(
        &point_policy(0.0, 0),
        EnvKind::PointShaped,
        point(0.0),
        0,
        10,
        0
    )
    .is_err());
}

#[test]
fn jsonl_round_trip() {
    let trajs = collect(
        &point_policy(0.0, 6),
        EnvKind::PointSparse,
        point(5.0),
        3,
        100,
        17,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &trajs).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
    let back = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, trajs);
}

proptest! {
    #[test]
    fn seed_paths_do_not_collide(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
        prop_assert_ne!(derive_seed(base, &[a, b]), derive_seed(base, &[b, a]));
    }
}
