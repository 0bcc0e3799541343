use std::path::Path;

use norml_core::envs::{CartpoleTask, EnvKind, PointTask, Task};
use norml_core::harness::{
    argmax_angle, emit_advantage_grid, evaluate_candidates, evaluate_heldout, load_series,
    mean_post_curve, plot_svg, read_curves, run, sample_candidates, sweep, write_curves,
    AdvantageRow, CurveRow, ExperimentConfig, Series, SweepCandidate, SweepRanges, CURVE_COLUMNS,
};
use norml_core::meta::{AlgoVariant, Checkpoint, CurveRecord, MetaConfig, MetaParams};
use norml_core::netcore::{advantage_forward, AdvantageParams};
use norml_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_meta(iterations: usize) -> MetaConfig {
    MetaConfig {
        iterations,
        rollouts: 3,
        tasks_per_iteration: 2,
        policy_hidden: vec![8],
        advantage_hidden: vec![8],
        ..MetaConfig::for_env(EnvKind::PointShaped)
    }
}

fn small_experiment(variant: AlgoVariant, iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        heldout_tasks: 3,
        record_wall_clock: false,
        ..ExperimentConfig::new(variant, small_meta(iterations))
    }
}

fn quiet() -> impl FnMut(AlgoVariant, u64, &CurveRecord) {
    |_, _, _| {}
}

fn params(config: &MetaConfig, variant: AlgoVariant, seed: u64) -> MetaParams {
    MetaParams::init(config, variant, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn zero_iteration_run_writes_header_only_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_experiment(AlgoVariant::Norml, 0);
    let results = run(
        &config,
        &[AlgoVariant::Norml],
        dir.path(),
        None,
        &mut quiet(),
    )
    .unwrap();
    assert_eq!(results.len(), 1);
    let csv = std::fs::read_to_string(dir.path().join("norml/seed-0/curves.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", CURVE_COLUMNS.join(",")));
    assert!(read_curves(&dir.path().join("norml/seed-0/curves.csv"))
        .unwrap()
        .is_empty());
    for file in [
        "config.json",
        "summary.json",
        "curves.svg",
        "norml/seed-0/checkpoint.json",
        "norml/seed-0/heldout.json",
    ] {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }
}

#[test]
fn identical_runs_write_identical_curves() {
    let config = small_experiment(AlgoVariant::Norml, 3);
    let read = |dir: &Path| std::fs::read(dir.join("norml/seed-0/curves.csv")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&config, &[AlgoVariant::Norml], a.path(), None, &mut quiet()).unwrap();
    run(&config, &[AlgoVariant::Norml], b.path(), None, &mut quiet()).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(
        read_curves(&a.path().join("norml/seed-0/curves.csv"))
            .unwrap()
            .len(),
        3
    );
    let ck = |dir: &Path| std::fs::read(dir.join("norml/seed-0/checkpoint.json")).unwrap();
    assert_eq!(ck(a.path()), ck(b.path()));
}

#[test]
fn ablation_batch_writes_one_curve_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![4, 5],
        ..small_experiment(AlgoVariant::Norml, 1)
    };
    let mut seen = Vec::new();
    let mut progress = |v: AlgoVariant, s: u64, _: &CurveRecord| seen.push((v, s));
    let results = run(&config, &AlgoVariant::ALL, dir.path(), None, &mut progress).unwrap();
    assert_eq!(results.len(), 10);
    assert_eq!(seen.len(), 10);
    for v in AlgoVariant::ALL {
        for s in [4, 5] {
            let rows = read_curves(
                &dir.path()
                    .join(v.name())
                    .join(format!("seed-{s}/curves.csv")),
            )
            .unwrap();
            assert_eq!(rows.len(), 1);
        }
    }
    // shared seeds give every variant the same held-out tasks
    let heldout: Vec<_> = results
        .iter()
        .filter(|r| r.seed == 4)
        .map(|r| &r.heldout)
        .collect();
    for h in &heldout[1..] {
        let tasks = |h: &norml_core::harness::HeldoutSummary| {
            h.tasks.iter().map(|t| t.task).collect::<Vec<_>>()
        };
        assert_eq!(tasks(h), tasks(heldout[0]));
    }
    let svg = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);
}

#[test]
fn verbatim_snapshot_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_experiment(AlgoVariant::DomainRandomization, 0);
    let text = format!("{}\n\n", serde_json::to_string(&config).unwrap());
    let parsed = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(parsed, config);
    run(
        &parsed,
        &[parsed.variant],
        dir.path(),
        Some(&text),
        &mut quiet(),
    )
    .unwrap();
    assert_eq!(
        std::fs::read_to_string(dir.path().join("config.json")).unwrap(),
        text
    );
}

#[test]
fn divergence_surfaces_from_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_experiment(AlgoVariant::Norml, 5);
    config.meta.beta = 1e6;
    let err = run(
        &config,
        &[AlgoVariant::Norml],
        dir.path(),
        None,
        &mut quiet(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn invalid_configs_report_field_paths() {
    let base = serde_json::to_value(small_experiment(AlgoVariant::Norml, 1)).unwrap();
    let cases = [
        ("/meta/rollouts", serde_json::json!(0), "meta.rollouts"),
        ("/schema_version", serde_json::json!(7), "schema_version"),
        ("/seeds", serde_json::json!([]), "seeds"),
        (
            "/meta/ppo/clip_epsilon",
            serde_json::json!(1.5),
            "meta.ppo.clip_epsilon",
        ),
        (
            "/sweep",
            serde_json::json!({"beta": [0.0, 1.0], "alpha_init": [1e-3, 1e-2], "log_std_init": [-1.0, 0.0]}),
            "sweep.beta",
        ),
    ];
    for (pointer, value, want) in cases {
        let mut v = base.clone();
        *v.pointer_mut(pointer).unwrap() = value;
        match ExperimentConfig::from_json(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, want),
            other => panic!("{pointer}: {other:?}"),
        }
    }
    let mut v = base.clone();
    v["surprise"] = serde_json::json!(1);
    assert!(matches!(
        ExperimentConfig::from_json(&v.to_string()),
        Err(Error::Config { .. })
    ));
}

#[test]
fn output_path_resolution() {
    let mut config = small_experiment(AlgoVariant::Maml, 0);
    let root = Path::new("/data/runs");
    assert_eq!(config.output_path(root), root.join("maml"));
    config.output_dir = Some("ablation".into());
    assert_eq!(config.output_path(root), root.join("ablation"));
    config.output_dir = Some("/elsewhere".into());
    assert_eq!(config.output_path(root), Path::new("/elsewhere"));
}

#[test]
fn dr_heldout_pre_equals_post() {
    let config = small_meta(0);
    let p = params(&config, AlgoVariant::DomainRandomization, 1);
    let summary = evaluate_heldout(&p, AlgoVariant::DomainRandomization, &config, 5, 2).unwrap();
    assert_eq!(summary.tasks.len(), 5);
    for t in &summary.tasks {
        assert_eq!(t.pre_return, t.post_return);
    }
    assert_eq!(summary.pre_mean, summary.post_mean);
}

#[test]
fn empty_heldout_summary() {
    let config = small_meta(0);
    let p = params(&config, AlgoVariant::Norml, 1);
    let summary = evaluate_heldout(&p, AlgoVariant::Norml, &config, 0, 2).unwrap();
    assert!(summary.tasks.is_empty());
    assert_eq!(summary.post_mean, None);
}

#[test]
fn heldout_evaluation_leaves_params_untouched() {
    let config = small_meta(0);
    let p = params(&config, AlgoVariant::Norml, 3);
    let before = serde_json::to_vec(&Checkpoint::new(
        &p,
        AlgoVariant::Norml,
        &config,
        0,
        0,
        None,
    ))
    .unwrap();
    let a = evaluate_heldout(&p, AlgoVariant::Norml, &config, 4, 9).unwrap();
    let after = serde_json::to_vec(&Checkpoint::new(
        &p,
        AlgoVariant::Norml,
        &config,
        0,
        0,
        None,
    ))
    .unwrap();
    assert_eq!(before, after);
    assert_eq!(
        a,
        evaluate_heldout(&p, AlgoVariant::Norml, &config, 4, 9).unwrap()
    );
}

#[test]
fn heldout_tasks_differ_from_training_tasks() {
    let config = MetaConfig {
        tasks_per_iteration: 10,
        ..small_meta(0)
    };
    let p = params(&config, AlgoVariant::DomainRandomization, 0);
    let seed = 12;
    let held: Vec<Task> = evaluate_heldout(&p, AlgoVariant::DomainRandomization, &config, 20, seed)
        .unwrap()
        .tasks
        .iter()
        .map(|t| t.task)
        .collect();
    for it in 0..50 {
        for t in norml_core::meta::iteration_tasks(&config, seed, it) {
            assert!(!held.contains(&t));
        }
    }
}

#[test]
fn cartpole_heldout_runs() {
    let config = MetaConfig {
        env: EnvKind::Cartpole,
        max_steps: Some(20),
        ..small_meta(0)
    };
    let p = params(&config, AlgoVariant::Norml, 5);
    let summary = evaluate_heldout(&p, AlgoVariant::Norml, &config, 2, 1).unwrap();
    for t in &summary.tasks {
        assert!(matches!(t.task, Task::Cartpole(CartpoleTask { .. })));
        assert!((0.0..=20.0).contains(&t.pre_return));
    }
}

#[test]
fn zero_advantage_net_gives_flat_grid() {
    let psi = AdvantageParams::zeros(2, 2, &[50, 50]).unwrap();
    let rows = emit_advantage_grid(&psi, PointTask { phi: 0.0 }, 360).unwrap();
    assert_eq!(rows.len(), 360);
    assert!(rows.iter().all(|r| r.advantage == 0.0));
    assert_eq!(rows[90].angle_deg, 90.0);
}

#[test]
fn grid_uses_rotated_next_state() {
    let config = small_meta(0);
    let psi = params(&config, AlgoVariant::Norml, 6).psi;
    let phi = 1.1;
    let rows = emit_advantage_grid(&psi, PointTask { phi }, 8).unwrap();
    for r in &rows {
        let w = r.angle_deg.to_radians();
        let next = [(w + phi).cos(), (w + phi).sin()];
        let want = advantage_forward(&psi, &[0.0, 0.0], &[w.cos(), w.sin()], &next).unwrap();
        assert!((r.advantage - want).abs() <= 1e-12);
    }
}

#[test]
fn argmax_wraps_to_signed_degrees() {
    let rows = |peak: usize| -> Vec<AdvantageRow> {
        (0..360)
            .map(|i| AdvantageRow {
                angle_deg: i as f64,
                advantage: if i == peak { 1.0 } else { 0.0 },
            })
            .collect()
    };
    assert_eq!(argmax_angle(&rows(10)), Some(10.0));
    assert_eq!(argmax_angle(&rows(350)), Some(-10.0));
    assert_eq!(argmax_angle(&rows(180)), Some(180.0));
    assert_eq!(argmax_angle(&[]), None);
}

#[test]
fn single_sample_sweep_returns_that_config() {
    let config = ExperimentConfig {
        sweep: Some(SweepRanges::default()),
        ..small_experiment(AlgoVariant::Norml, 1)
    };
    let out = sweep(&config, 1, 3, &mut |_, _| {}).unwrap();
    assert_eq!(out.candidates.len(), 1);
    assert_eq!(out.best, 0);
    assert_eq!(out.best_config, out.candidates[0].apply(&config));
    assert!(out.candidates[0].score.is_some());
}

#[test]
fn diverging_candidate_is_disqualified() {
    let config = small_experiment(AlgoVariant::Norml, 4);
    let candidates = vec![
        SweepCandidate::new(1e6, 1e-3, -0.5),
        SweepCandidate::new(1e-3, 1e-3, -0.5),
    ];
    let out = evaluate_candidates(&config, candidates, &mut |_, _| {}).unwrap();
    assert_eq!(out.best, 1);
    assert!(out.candidates[0].score.is_none());
    assert!(out.candidates[0].failure.is_some());
    assert_eq!(out.best_config.meta.beta, 1e-3);
}

#[test]
fn all_diverging_candidates_is_an_error() {
    let config = small_experiment(AlgoVariant::Norml, 4);
    let out = evaluate_candidates(
        &config,
        vec![SweepCandidate::new(1e6, 1e-3, -0.5)],
        &mut |_, _| {},
    );
    assert!(matches!(out, Err(Error::Diverged { .. })));
}

#[test]
fn sweep_is_reproducible_and_within_ranges() {
    let ranges = SweepRanges {
        beta: [1e-4, 1e-2],
        alpha_init: [1e-3, 1e-1],
        log_std_init: [-2.0, -1.0],
    };
    let config = ExperimentConfig {
        sweep: Some(ranges),
        ..small_experiment(AlgoVariant::Maml, 1)
    };
    let a = sample_candidates(&config, 200, 8);
    assert_eq!(a, sample_candidates(&config, 200, 8));
    assert_ne!(a, sample_candidates(&config, 200, 9));
    for c in &a {
        assert!((1e-4..=1e-2).contains(&c.beta));
        assert!((1e-3..=1e-1).contains(&c.alpha_init));
        assert!((-2.0..=-1.0).contains(&c.log_std_init));
    }
    // log-uniform: about half the draws fall below the geometric midpoint
    let below = a.iter().filter(|c| c.beta < 1e-3).count();
    assert!((70..=130).contains(&below), "{below}");
    let out1 = sweep(&config, 2, 5, &mut |_, _| {}).unwrap();
    let out2 = sweep(&config, 2, 5, &mut |_, _| {}).unwrap();
    assert_eq!(out1.candidates, out2.candidates);
}

#[test]
fn mean_curve_averages_and_truncates() {
    let row = |i: usize, post: f64| CurveRow {
        iteration: i,
        pre_mean: 0.0,
        pre_std: 0.0,
        post_mean: post,
        post_std: 0.0,
        seconds: 0.0,
    };
    let runs = vec![
        vec![row(0, -4.0), row(1, -2.0), row(2, -1.0)],
        vec![row(0, -2.0), row(1, 0.0)],
    ];
    assert_eq!(mean_post_curve(&runs), vec![(0.0, -3.0), (1.0, -1.0)]);
}

#[test]
fn plotting_is_a_pure_function_of_curves() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<CurveRow> = (0..5)
        .map(|i| CurveRow {
            iteration: i,
            pre_mean: -10.0,
            pre_std: 1.0,
            post_mean: -10.0 + i as f64,
            post_std: 0.5,
            seconds: 0.1 * i as f64,
        })
        .collect();
    let path = dir.path().join("curves.csv");
    write_curves(&path, &rows).unwrap();
    let before = std::fs::read(&path).unwrap();
    let series = load_series(dir.path(), "norml").unwrap();
    let svg = plot_svg(std::slice::from_ref(&series), "return");
    assert_eq!(
        svg,
        plot_svg(&[load_series(dir.path(), "norml").unwrap()], "return")
    );
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains(">norml<"));
    assert_eq!(series.points.len(), 5);
    let empty = plot_svg(
        &[Series {
            label: "a<b".into(),
            points: vec![],
        }],
        "r",
    );
    assert!(empty.contains("a&lt;b"));
}

#[test]
fn curve_parser_rejects_wrong_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    std::fs::write(&path, "iteration,post_mean\n0,1\n").unwrap();
    assert!(matches!(read_curves(&path), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn curves_round_trip(rows in prop::collection::vec(
        (0usize..10_000, -1e3f64..1e3, 0f64..1e2, -1e3f64..1e3, 0f64..1e2, 0f64..1e5), 0..20))
    {
        let rows: Vec<CurveRow> = rows
            .into_iter()
            .map(|(iteration, pre_mean, pre_std, post_mean, post_std, seconds)| CurveRow {
                iteration, pre_mean, pre_std, post_mean, post_std, seconds,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curves(&path, &rows).unwrap();
        prop_assert_eq!(read_curves(&path).unwrap(), rows);
    }
}
