//! Experiment plumbing: JSON configs, training runs with on-disk artifacts,
//! held-out evaluation, hyperparameter sweeps, advantage grids and SVG
//! learning curves.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.json                  verbatim config snapshot
//! <out>/summary.json                 held-out statistics for every run
//! <out>/curves.svg                   one series per variant (seed mean)
//! <out>/<variant>/seed-<n>/curves.csv
//! <out>/<variant>/seed-<n>/checkpoint.json
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{point_step, PointState, PointTask, Task};
use crate::error::{Error, Result};
use crate::meta::{
    self, adapt, mean_std, phase, AlgoVariant, Checkpoint, CurveRecord, MetaConfig, MetaParams,
};
use crate::netcore::{advantage_forward, AdvantageParams};
use crate::rollout::{collect, derive_seed, rng_for, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;
pub const CURVE_COLUMNS: [&str; 6] = [
    "iteration",
    "pre_mean",
    "pre_std",
    "post_mean",
    "post_std",
    "seconds",
];
const SWEEP_PHASE: u64 = 7;

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_heldout_tasks() -> usize {
    20
}

fn default_true() -> bool {
    true
}

/// Closed sampling ranges for the swept hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRanges {
    /// Log-uniform.
    pub beta: [f64; 2],
    /// Log-uniform.
    pub alpha_init: [f64; 2],
    /// Uniform.
    pub log_std_init: [f64; 2],
}

impl Default for SweepRanges {
    fn default() -> Self {
        Self {
            beta: [1e-3, 1e-2],
            alpha_init: [3e-2, 3.0],
            log_std_init: [-1.2, 0.0],
        }
    }
}

/// One experiment, as read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub variant: AlgoVariant,
    pub meta: MetaConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_heldout_tasks")]
    pub heldout_tasks: usize,
    #[serde(default)]
    pub sweep: Option<SweepRanges>,
    /// Relative paths resolve against the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// When false the `seconds` column is written as 0 so that curve files
    /// are byte-reproducible.
    #[serde(default = "default_true")]
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn new(variant: AlgoVariant, meta: MetaConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variant,
            meta,
            seeds: default_seeds(),
            heldout_tasks: default_heldout_tasks(),
            sweep: None,
            output_dir: None,
            record_wall_clock: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            path: "<root>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                &format!("unsupported version {}", self.schema_version),
            );
        }
        if self.seeds.is_empty() {
            return bad("seeds", "needs at least one seed");
        }
        if let Some(r) = &self.sweep {
            let ranges = [
                ("sweep.beta", r.beta, true),
                ("sweep.alpha_init", r.alpha_init, true),
                ("sweep.log_std_init", r.log_std_init, false),
            ];
            for (path, [lo, hi], log) in ranges {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) || (log && lo <= 0.0) {
                    return bad(
                        path,
                        "needs finite lo <= hi (positive for log-uniform ranges)",
                    );
                }
            }
        }
        self.meta.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::Config {
                path: format!("meta.{path}"),
                message,
            },
            other => other,
        })
    }

    /// Output directory under `root` (absolute `output_dir` wins).
    pub fn output_path(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(dir) if dir.is_absolute() => dir.clone(),
            Some(dir) => root.join(dir),
            None => root.join(self.variant.name()),
        }
    }
}

/// One row of `curves.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub pre_mean: f64,
    pub pre_std: f64,
    pub post_mean: f64,
    pub post_std: f64,
    pub seconds: f64,
}

impl From<&CurveRecord> for CurveRow {
    fn from(r: &CurveRecord) -> Self {
        Self {
            iteration: r.iteration,
            pre_mean: r.pre_mean,
            pre_std: r.pre_std,
            post_mean: r.post_mean,
            post_std: r.post_std,
            seconds: r.seconds,
        }
    }
}

/// Appends curve rows to a CSV file, flushing after every row.
pub struct CurveWriter {
    inner: csv::Writer<File>,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        inner.write_record(CURVE_COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, row: &CurveRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = CurveWriter::create(path)?;
    for row in rows {
        w.push(row)?;
    }
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != CURVE_COLUMNS {
        return Err(Error::Format(format!(
            "{}: expected columns {CURVE_COLUMNS:?}, found {header:?}",
            path.display()
        )));
    }
    Ok(reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}

/// Pre- and post-adaptation returns on one held-out task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutTask {
    pub task: Task,
    pub pre_return: f64,
    pub post_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldoutSummary {
    pub tasks: Vec<HeldoutTask>,
    pub pre_mean: Option<f64>,
    pub pre_std: Option<f64>,
    pub post_mean: Option<f64>,
    pub post_std: Option<f64>,
}

impl HeldoutSummary {
    pub fn from_tasks(tasks: Vec<HeldoutTask>) -> Self {
        if tasks.is_empty() {
            return Self::default();
        }
        let pre: Vec<f64> = tasks.iter().map(|t| t.pre_return).collect();
        let post: Vec<f64> = tasks.iter().map(|t| t.post_return).collect();
        let (pre_mean, pre_std) = mean_std(&pre);
        let (post_mean, post_std) = mean_std(&post);
        Self {
            tasks,
            pre_mean: Some(pre_mean),
            pre_std: Some(pre_std),
            post_mean: Some(post_mean),
            post_std: Some(post_std),
        }
    }
}

fn mean_return(trajs: &[Trajectory]) -> f64 {
    trajs
        .iter()
        .map(|t| t.total_reward().unwrap_or(f64::NAN))
        .sum::<f64>()
        / trajs.len() as f64
}

/// Evaluates `params` on `n_tasks` held-out tasks. Per task, `config.rollouts`
/// meta rollouts drive one adaptation step; the meta-policy and the adapted
/// policy are then scored on the same evaluation seed.
///
/// Held-out task and rollout seeds use counter paths that meta-training
/// never produces.
pub fn evaluate_heldout(
    params: &MetaParams,
    variant: AlgoVariant,
    config: &MetaConfig,
    n_tasks: usize,
    seed: u64,
) -> Result<HeldoutSummary> {
    let mut task_rng = rng_for(seed, &[phase::HELD_OUT_TASKS]);
    let tasks: Vec<Task> = (0..n_tasks)
        .map(|_| config.env.sample_task(&mut task_rng))
        .collect();
    let horizon = config.horizon();
    let k = config.rollouts;
    let results = tasks
        .par_iter()
        .enumerate()
        .map(|(j, &task)| {
            let adapt_seed = derive_seed(seed, &[phase::HELD_OUT_ADAPT, j as u64]);
            let eval_seed = derive_seed(seed, &[phase::HELD_OUT_EVAL, j as u64]);
            let meta_rollouts = collect(&params.theta, config.env, task, k, horizon, adapt_seed)?;
            let adapted = adapt(params, variant, config, &meta_rollouts)?;
            let pre = collect(&params.theta, config.env, task, k, horizon, eval_seed)?;
            let post = collect(&adapted, config.env, task, k, horizon, eval_seed)?;
            Ok(HeldoutTask {
                task,
                pre_return: mean_return(&pre),
                post_return: mean_return(&post),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeldoutSummary::from_tasks(results))
}

/// Result of one (variant, seed) training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: AlgoVariant,
    pub seed: u64,
    pub directory: PathBuf,
    pub heldout: HeldoutSummary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Trains one variant under one seed, writing `curves.csv` as training
/// proceeds and `checkpoint.json` at the end, then evaluates on held-out
/// tasks.
pub fn run_single(
    config: &ExperimentConfig,
    variant: AlgoVariant,
    seed: u64,
    dir: &Path,
    progress: &mut dyn FnMut(AlgoVariant, u64, &CurveRecord),
) -> Result<RunResult> {
    std::fs::create_dir_all(dir)?;
    let mut writer = CurveWriter::create(&dir.join("curves.csv"))?;
    let mut write_err = None;
    let outcome = meta::meta_train_with(&config.meta, variant, seed, |rec| {
        progress(variant, seed, rec);
        let mut row = CurveRow::from(rec);
        if !config.record_wall_clock {
            row.seconds = 0.0;
        }
        if let Err(e) = writer.push(&row) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let checkpoint = Checkpoint::new(
        &outcome.params,
        variant,
        &config.meta,
        seed,
        config.meta.iterations,
        Some(outcome.adam),
    );
    checkpoint.write(&dir.join("checkpoint.json"))?;
    let heldout = evaluate_heldout(
        &outcome.params,
        variant,
        &config.meta,
        config.heldout_tasks,
        seed,
    )?;
    write_json(&dir.join("heldout.json"), &heldout)?;
    Ok(RunResult {
        variant,
        seed,
        directory: dir.to_path_buf(),
        heldout,
    })
}

/// Runs every `(variant, seed)` pair into `out`, snapshots the config and
/// writes a summary and a learning-curve plot. `snapshot` is the verbatim
/// config text when the config came from a file.
pub fn run(
    config: &ExperimentConfig,
    variants: &[AlgoVariant],
    out: &Path,
    snapshot: Option<&str>,
    progress: &mut dyn FnMut(AlgoVariant, u64, &CurveRecord),
) -> Result<Vec<RunResult>> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    match snapshot {
        Some(text) => std::fs::write(out.join("config.json"), text)?,
        None => write_json(&out.join("config.json"), config)?,
    }
    let mut results = Vec::new();
    for &variant in variants {
        for &seed in &config.seeds {
            let dir = out.join(variant.name()).join(format!("seed-{seed}"));
            results.push(run_single(config, variant, seed, &dir, progress)?);
        }
    }
    write_json(&out.join("summary.json"), &results)?;
    let mut series = Vec::new();
    for &variant in variants {
        series.push(load_series(&out.join(variant.name()), variant.name())?);
    }
    std::fs::write(
        out.join("curves.svg"),
        plot_svg(&series, "post-adaptation return"),
    )?;
    Ok(results)
}

/// One line of a plot.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Mean post-adaptation curve over runs, truncated to the shortest run.
pub fn mean_post_curve(runs: &[Vec<CurveRow>]) -> Vec<(f64, f64)> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let mean = runs.iter().map(|r| r[i].post_mean).sum::<f64>() / runs.len() as f64;
            (runs[0][i].iteration as f64, mean)
        })
        .collect()
}

/// Reads `dir/curves.csv`, or averages `dir/seed-*/curves.csv` when the
/// directory holds several seeds.
pub fn load_series(dir: &Path, label: &str) -> Result<Series> {
    let direct = dir.join("curves.csv");
    let runs = if direct.exists() {
        vec![read_curves(&direct)?]
    } else {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path().join("curves.csv")))
            .filter(|p| p.exists())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format(format!(
                "{} holds no curves.csv",
                dir.display()
            )));
        }
        paths
            .iter()
            .map(|p| read_curves(p))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Series {
        label: label.into(),
        points: mean_post_curve(&runs),
    })
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn nice_bounds(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart of return against iteration, one polyline per series.
pub fn plot_svg(series: &[Series], y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 20.0, 50.0);
    let finite = || {
        series
            .iter()
            .flat_map(|s| &s.points)
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let (x0, x1) = nice_bounds(
        finite().map(|p| p.0).fold(f64::INFINITY, f64::min),
        finite().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = nice_bounds(
        finite().map(|p| p.1).fold(f64::INFINITY, f64::min),
        finite().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.0}</text>"#,
            px(xv),
            h - bottom + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            left - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">meta-iteration</text>"#,
        (left + w - right) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = w - right + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly:.1}">{}</text>"#,
            lx + 26.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Learned advantage at the origin for unit actions at each grid angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub angle_deg: f64,
    pub advantage: f64,
}

/// Evaluates `A_psi((0,0), (cos w, sin w), s')` for `n` evenly spaced angles
/// `w` in `[0, 360)` degrees, with `s'` from the dynamics of `task`.
pub fn emit_advantage_grid(
    psi: &AdvantageParams,
    task: PointTask,
    n: usize,
) -> Result<Vec<AdvantageRow>> {
    if psi.state_dim != 2 || psi.action_dim != 2 {
        return Err(Error::Contract(
            "advantage grid needs a point-agent advantage network".into(),
        ));
    }
    let origin = PointState { x: 0.0, y: 0.0 };
    (0..n)
        .map(|i| {
            let angle_deg = 360.0 * i as f64 / n as f64;
            let (sin, cos) = angle_deg.to_radians().sin_cos();
            let next = point_step(origin, [cos, sin], task);
            let advantage = advantage_forward(psi, &[0.0, 0.0], &[cos, sin], &[next.x, next.y])?;
            Ok(AdvantageRow {
                angle_deg,
                advantage,
            })
        })
        .collect()
}

/// Grid angle with the largest advantage, wrapped to (-180, 180].
pub fn argmax_angle(rows: &[AdvantageRow]) -> Option<f64> {
    let best = rows.iter().filter(|r| r.advantage.is_finite()).fold(
        None::<&AdvantageRow>,
        |best, r| match best {
            Some(b) if b.advantage >= r.advantage => Some(b),
            _ => Some(r),
        },
    )?;
    let a = best.angle_deg.rem_euclid(360.0);
    Some(if a > 180.0 { a - 360.0 } else { a })
}

pub fn write_advantage_grid(path: &Path, rows: &[AdvantageRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["angle_deg", "advantage"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Hyperparameters of one sweep candidate and how it scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCandidate {
    pub beta: f64,
    pub alpha_init: f64,
    pub log_std_init: f64,
    /// Mean held-out post-adaptation return over seeds; `None` when
    /// disqualified.
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SweepCandidate {
    pub fn new(beta: f64, alpha_init: f64, log_std_init: f64) -> Self {
        Self {
            beta,
            alpha_init,
            log_std_init,
            score: None,
            failure: None,
        }
    }

    pub fn apply(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut out = config.clone();
        out.meta.beta = self.beta;
        out.meta.alpha_init = self.alpha_init;
        out.meta.log_std_init = self.log_std_init;
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub candidates: Vec<SweepCandidate>,
    pub best: usize,
    pub best_config: ExperimentConfig,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Draws `n` candidates from the config's sweep ranges.
pub fn sample_candidates(config: &ExperimentConfig, n: usize, seed: u64) -> Vec<SweepCandidate> {
    let ranges = config.sweep.unwrap_or_default();
    let mut rng = rng_for(seed, &[SWEEP_PHASE]);
    (0..n)
        .map(|_| {
            let beta = log_uniform(&mut rng, ranges.beta);
            let alpha = log_uniform(&mut rng, ranges.alpha_init);
            let [lo, hi] = ranges.log_std_init;
            let log_std = if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            };
            SweepCandidate::new(beta, alpha, log_std)
        })
        .collect()
}

/// Trains and evaluates every candidate on all config seeds. Candidates that
/// diverge are disqualified; the best remaining held-out post-adaptation
/// mean wins.
pub fn evaluate_candidates(
    config: &ExperimentConfig,
    mut candidates: Vec<SweepCandidate>,
    on_scored: &mut dyn FnMut(usize, &SweepCandidate),
) -> Result<SweepOutcome> {
    if candidates.is_empty() {
        return Err(Error::Contract("sweep needs at least one candidate".into()));
    }
    for (i, cand) in candidates.iter_mut().enumerate() {
        let trial = cand.apply(config);
        let mut scores = Vec::new();
        for &seed in &trial.seeds {
            let scored = meta::meta_train(&trial.meta, trial.variant, seed).and_then(|out| {
                evaluate_heldout(
                    &out.params,
                    trial.variant,
                    &trial.meta,
                    trial.heldout_tasks,
                    seed,
                )
            });
            match scored {
                Ok(summary) => scores.push(summary.post_mean.unwrap_or(f64::NAN)),
                Err(e @ Error::Diverged { .. }) => {
                    cand.failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if cand.failure.is_none() {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            if mean.is_finite() {
                cand.score = Some(mean);
            } else {
                cand.failure = Some("non-finite held-out return".into());
            }
        }
        on_scored(i, cand);
    }
    let best = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.score.map(|s| (i, s)))
        .fold(None::<(usize, f64)>, |best, (i, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Diverged {
            iteration: 0,
            detail: "every sweep candidate was disqualified".into(),
        })?;
    let best_config = candidates[best].apply(config);
    Ok(SweepOutcome {
        candidates,
        best,
        best_config,
    })
}

/// Random search over (beta, alpha_init, log_std_init).
pub fn sweep(
    config: &ExperimentConfig,
    n_samples: usize,
    seed: u64,
    on_scored: &mut dyn FnMut(usize, &SweepCandidate),
) -> Result<SweepOutcome> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::Contract("sweep needs at least one sample".into()));
    }
    evaluate_candidates(
        config,
        sample_candidates(config, n_samples, seed),
        on_scored,
    )
}

/// Writes a sweep outcome as pretty JSON.
pub fn write_sweep(path: &Path, outcome: &SweepOutcome) -> Result<()> {
    write_json(path, outcome)
}
