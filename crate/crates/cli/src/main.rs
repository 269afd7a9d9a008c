//! Experiment runner CLI.
//!
//! Subcommands: `run` executes one experiment config and writes CSVs,
//! `sweep` additionally reports the best grid point, `verify` prints the
//! constant-step admissibility gate per grid point, and `demo-divergence`
//! reproduces the two-state instability analysis. Exit code 2 marks a
//! config validation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use ges_core::analysis::{divergence_region, two_state_a};
use ges_core::envs::make_two_state;
use ges_core::error::Error;
use ges_core::fa::{compute_model, ModelOptions};
use ges_core::harness::{
    exact_model_for, run_experiment, sweep_grid, verify_stepsize_gate, ExperimentConfig,
};
use ges_core::learners::{
    expected_iterate, run_ges, GesRunConfig, LearnerKind, MetricContext, StepSizes,
};
use ges_core::rng;

#[derive(Parser)]
#[command(
    name = "ges",
    about = "Off-policy evaluation experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of runs per grid point.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the number of episodes per run.
    #[arg(long)]
    episodes: Option<usize>,
    /// Write CSV output into this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(runs) = self.runs {
            config.n_runs = runs;
        }
        if let Some(episodes) = self.episodes {
            config.n_episodes = episodes;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write per-metric plus aggregate CSVs.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the config's grid and report the best point by final-episode metric.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check the constant-step admissibility gate per grid point.
    Verify { config: PathBuf },
    /// Reproduce the two-state instability analysis.
    DemoDivergence {
        #[arg(long, default_value_t = 202)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load(path: &PathBuf, overrides: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let config = load(&config, &overrides)?;
            let result = run_experiment(&config, overrides.out_dir.as_deref())?;
            for point in &result.points {
                let name = config.name.as_deref().unwrap_or(&config.env);
                print!(
                    "{name} [{}] alpha={} ratio={}: ",
                    point.schedule, point.point.alpha, point.point.ratio
                );
                if point.gate_passed == Some(false) {
                    println!("skipped (step-size gate failed)");
                    continue;
                }
                let finals: Vec<String> = point
                    .final_means
                    .iter()
                    .map(|(metric, mean)| format!("{metric}={mean:.6e}"))
                    .collect();
                println!(
                    "diverged {}/{}; final {}",
                    point.diverged_runs,
                    config.n_runs,
                    finals.join(" ")
                );
            }
            for file in &result.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::Sweep { config, overrides } => {
            let config = load(&config, &overrides)?;
            let sweep = sweep_grid(&config, overrides.out_dir.as_deref())?;
            if sweep.all_diverged {
                println!("all grid points diverged or failed the gate; no best point");
                return Ok(());
            }
            match sweep.best {
                Some(best) => {
                    let metric = best
                        .final_means
                        .iter()
                        .next()
                        .map(|(m, v)| format!("{m}={v:.6e}"))
                        .unwrap_or_default();
                    println!(
                        "best grid point: alpha={} ratio={} schedule={} ({metric}, {}/{} diverged)",
                        best.point.alpha,
                        best.point.ratio,
                        best.schedule,
                        best.diverged_runs,
                        config.n_runs
                    );
                }
                None => println!("no grid point produced a finite final metric"),
            }
            Ok(())
        }
        Command::Verify { config } => {
            let config = ExperimentConfig::load(&config)?;
            config.validate()?;
            let model = exact_model_for(&config)?;
            let verdicts = verify_stepsize_gate(&config, &model);
            println!("operator norm |A| = {:.6}", verdicts[0].a_norm);
            let mut failed = 0;
            for v in &verdicts {
                if !v.passed {
                    failed += 1;
                }
                println!(
                    "alpha={:<12.6e} ratio={:<12.6e} gate={}",
                    v.point.alpha,
                    v.point.ratio,
                    if v.passed { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{} of {} grid points pass the gate",
                verdicts.len() - failed,
                verdicts.len()
            );
            Ok(())
        }
        Command::DemoDivergence {
            seed,
            runs,
            out_dir,
        } => demo_divergence(seed, runs, out_dir),
    }
}

/// The two-state instability demo: closed-form growth prediction for the
/// expected iteration, then sampled naive-learner runs.
fn demo_divergence(seed: u64, runs: usize, out_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let (gamma, lambda, alpha) = (0.99, 0.9, 0.05);
    let threshold = divergence_region(lambda);
    println!("lambda = {lambda}, gamma = {gamma} (> threshold {threshold:.6}), alpha = {alpha}");
    let a = two_state_a(gamma, lambda);
    let growth = 1.0 + alpha * a[(0, 0)];
    let predicted = (1e6f64.ln() / growth.ln()).ceil() as usize;
    println!(
        "closed form A[0][0] = {:.6}; per-step growth {growth:.6}; predicted 1e6-crossing at step {predicted}",
        a[(0, 0)]
    );

    let dom = make_two_state(gamma);
    let model = compute_model(
        &dom.mdp,
        &dom.target,
        &dom.behavior,
        &dom.features,
        lambda,
        &dom.indexer,
        &ModelOptions::with_uniform_weight(4, 0.5),
    )?;
    let theta0 = DVector::from_vec(vec![1.0, 1.0]);
    let path = expected_iterate(&theta0, &model, alpha, predicted + 2);
    let crossing = path
        .iter()
        .position(|t| t[0].abs() >= 1e6)
        .unwrap_or(usize::MAX);
    println!("expected iteration crosses 1e6 at step {crossing}");

    let mut diverged = 0;
    for run in 0..runs {
        let config = GesRunConfig {
            learner: LearnerKind::Naive,
            lambda,
            step_sizes: StepSizes::constant(alpha, alpha),
            n_episodes: 1,
            episode_len: 100_000,
            theta0: Some(theta0.clone()),
            log_params: false,
        };
        let record = run_ges(
            &dom.mdp,
            &dom.target,
            &dom.behavior,
            &dom.features,
            &dom.start,
            &config,
            &MetricContext::default(),
            &mut rng::stream(seed, run as u64),
        )?;
        if record.diverged {
            diverged += 1;
        }
    }
    println!("sampled naive runs: {diverged}/{runs} diverged (|theta| > 1e8 within 1e5 steps)");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        let out = dir.join("divergence_expected_path.csv");
        let mut text = String::from("step,theta_1,theta_2\n");
        for (t, theta) in path.iter().enumerate() {
            text.push_str(&format!("{t},{},{}\n", theta[0], theta[1]));
        }
        std::fs::write(&out, text)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
