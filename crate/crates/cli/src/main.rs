//! Command-line front end for meta-training, evaluation, sweeps and plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use norml_core::envs::{EnvKind, PointTask};
use norml_core::harness::{self, ExperimentConfig, Series};
use norml_core::meta::{AlgoVariant, Checkpoint, MetaConfig};

#[derive(Parser)]
#[command(name = "norml", version, about = "No-reward meta learning experiments")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "NORML_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train one variant (or `all` for the ablation batch) on every seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Variant name, or `all`.
        #[arg(long)]
        variant: Option<String>,
        /// Replaces the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Held-out pre/post adaptation returns of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: usize,
        /// Defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random search over beta, alpha_init and log_std_init.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// SVG learning curves, one series per run directory.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learned advantage at the origin over a ring of unit actions.
    AdvantageGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 360)]
        angles: usize,
        /// Task rotation in radians.
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
    },
    /// Print a default experiment config.
    Config {
        #[arg(long, default_value = "point_shaped")]
        env: String,
        #[arg(long, default_value = "norml")]
        variant: String,
    },
}

fn parse_variants(name: &str) -> Result<Vec<AlgoVariant>> {
    if name == "all" {
        return Ok(AlgoVariant::ALL.to_vec());
    }
    Ok(vec![name.parse()?])
}

fn train(
    root: &Path,
    path: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    let variants = match variant {
        Some(v) => parse_variants(v)?,
        None => vec![config.variant],
    };
    if variants.len() == 1 {
        config.variant = variants[0];
    }
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    let overridden = variant.is_some() || seed.is_some();
    let out = config.output_path(root);
    let snapshot = (!overridden).then_some(text.as_str());
    let mut progress = |v: AlgoVariant, s: u64, rec: &norml_core::meta::CurveRecord| {
        if !quiet {
            eprintln!(
                "{v} seed {s} iter {:>4}: pre {:>9.3} post {:>9.3} ({:.1}s)",
                rec.iteration, rec.pre_mean, rec.post_mean, rec.seconds
            );
        }
    };
    let results = harness::run(&config, &variants, &out, snapshot, &mut progress)?;
    for r in &results {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        println!(
            "{} seed {}: held-out pre {} post {} ({} tasks) -> {}",
            r.variant,
            r.seed,
            fmt(r.heldout.pre_mean),
            fmt(r.heldout.post_mean),
            r.heldout.tasks.len(),
            r.directory.display()
        );
    }
    Ok(())
}

fn eval(path: &Path, tasks: usize, seed: Option<u64>) -> Result<()> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    let params = ck.params()?;
    let summary = harness::evaluate_heldout(
        &params,
        ck.variant,
        &ck.config,
        tasks,
        seed.unwrap_or(ck.seed),
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn sweep(root: &Path, path: &Path, samples: usize, seed: u64) -> Result<()> {
    let config = ExperimentConfig::load(path)?;
    let mut report = |i: usize, c: &harness::SweepCandidate| {
        let score = c
            .score
            .map_or_else(|| "disqualified".to_string(), |s| format!("{s:.3}"));
        eprintln!(
            "candidate {i}: beta {:.3e} alpha {:.3e} log_std {:.3}: {score}",
            c.beta, c.alpha_init, c.log_std_init
        );
    };
    let outcome = harness::sweep(&config, samples, seed, &mut report)?;
    let out = config.output_path(root);
    std::fs::create_dir_all(&out)?;
    harness::write_sweep(&out.join("sweep.json"), &outcome)?;
    eprintln!("best: candidate {}", outcome.best);
    println!("{}", serde_json::to_string_pretty(&outcome.best_config)?);
    Ok(())
}

fn plot(runs: &[PathBuf], out: &Path) -> Result<()> {
    let series = runs
        .iter()
        .map(|dir| {
            let label = dir.file_name().map_or_else(
                || dir.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            harness::load_series(dir, &label)
                .with_context(|| format!("loading curves from {}", dir.display()))
        })
        .collect::<Result<Vec<Series>>>()?;
    std::fs::write(out, harness::plot_svg(&series, "post-adaptation return"))?;
    Ok(())
}

fn advantage_grid(path: &Path, out: &Path, angles: usize, phi: f64) -> Result<()> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    if !matches!(ck.config.env, EnvKind::PointShaped | EnvKind::PointSparse) {
        bail!(
            "advantage grids need a point-agent checkpoint, found {:?}",
            ck.config.env
        );
    }
    let params = ck.params()?;
    let rows = harness::emit_advantage_grid(&params.psi, PointTask { phi }, angles)?;
    harness::write_advantage_grid(out, &rows)?;
    if let Some(a) = harness::argmax_angle(&rows) {
        println!("argmax angle {a:.1} deg");
    }
    Ok(())
}

fn print_config(env: &str, variant: &str) -> Result<()> {
    let env: EnvKind = serde_json::from_value(serde_json::Value::String(env.into()))
        .with_context(|| format!("unknown env `{env}`"))?;
    let config = ExperimentConfig::new(variant.parse()?, MetaConfig::for_env(env));
    println!("{}", serde_json::to_string_pretty(&config)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root.as_path();
    let result = match &cli.command {
        Command::Train {
            config,
            variant,
            seed,
            quiet,
        } => train(root, config, variant.as_deref(), *seed, *quiet),
        Command::Eval {
            checkpoint,
            tasks,
            seed,
        } => eval(checkpoint, *tasks, *seed),
        Command::Sweep {
            config,
            samples,
            seed,
        } => sweep(root, config, *samples, *seed),
        Command::Plot { runs, out } => plot(runs, out),
        Command::AdvantageGrid {
            checkpoint,
            out,
            angles,
            phi,
        } => advantage_grid(checkpoint, out, *angles, *phi),
        Command::Config { env, variant } => print_config(env, variant),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
