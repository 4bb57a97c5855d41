//! Command-line front end: run configured experiments, evaluate and
//! certify saved checkpoints, run the verification suite, and rebuild
//! reports from results directories.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use mpg_core::{
    certify, evaluate_cartpole, evaluate_frozenlake, evaluate_frozenlake_neural,
    frozenlake_as_mdp, load_checkpoint,
    markdown_report, ntk_gram, results_csv, rows_from_results_csv, run_experiment, solve_optimal,
    verify_suite, write_outputs, CartPole, EnvKind, Environment, ExperimentSpec, LoadedPolicy,
    VerifyLevel, LAMBDA_CUT_REL,
};

#[derive(Parser)]
#[command(name = "mpg", about = "Nested max-entropy policy-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config and write results.
    Train {
        /// Path to the experiment config (TOML).
        config: PathBuf,
    },
    /// Play evaluation games with a saved checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        /// Environment id: frozenlake-4x4, frozenlake-8x8 or cartpole.
        env: String,
        #[arg(long, default_value_t = 100)]
        games: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a saved checkpoint against the exact oracle (grid worlds)
    /// or its tangent-kernel positivity certificate (neural policies).
    Certify {
        checkpoint: PathBuf,
        /// Environment id the checkpoint was trained on.
        env: String,
    },
    /// Run the cross-module identity and statistical checks.
    Verify {
        #[arg(long, default_value = "fast")]
        level: String,
    },
    /// Rebuild the markdown report from a results directory.
    Report {
        results_dir: PathBuf,
    },
}

fn init_workers() -> anyhow::Result<()> {
    if let Ok(w) = std::env::var("MPG_WORKERS") {
        let n: usize = w
            .parse()
            .with_context(|| format!("MPG_WORKERS must be a positive integer, got '{w}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to configure the worker pool")?;
    }
    Ok(())
}

fn cmd_train(config: &PathBuf) -> anyhow::Result<()> {
    let spec = ExperimentSpec::from_path(config)
        .with_context(|| format!("failed to load config {}", config.display()))?;
    eprintln!(
        "running '{}' on {}: {} cells x {} agents, {} episodes each",
        spec.name,
        spec.environment,
        spec.cells().len(),
        spec.agents,
        spec.episodes
    );
    let rows = run_experiment(&spec)?;
    write_outputs(&spec, &rows)?;
    print!("{}", results_csv(&rows));
    eprintln!("wrote results to {}", spec.output);
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &PathBuf,
    env_id: &str,
    games: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let env = EnvKind::parse(env_id)?;
    let (stored, policy) = load_checkpoint(checkpoint)?;
    if stored != env {
        bail!("checkpoint was trained on {stored}, not {env}");
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let out = match (&policy, env.frozenlake_spec()) {
        (LoadedPolicy::Tabular(p), Some(fl)) => evaluate_frozenlake(&fl, p, games, &mut rng)?,
        (LoadedPolicy::Tabular(_), None) => bail!("tabular checkpoint on a non-grid environment"),
        (LoadedPolicy::Neural(p), Some(fl)) => {
            let fl = if p.state_dim == fl.n_states() {
                fl.with_one_hot()
            } else {
                fl
            };
            evaluate_frozenlake_neural(&fl, p, games, &mut rng)?
        }
        (LoadedPolicy::Neural(p), None) => {
            evaluate_cartpole(&CartPole::default(), p, games, &mut rng)?
        }
    };
    let avg_all = out.steps_all as f64 / out.games as f64;
    println!(
        "games: {}\nsuccess: {:.2}%\navg steps (all games): {:.2}",
        out.games,
        out.success_pct(),
        avg_all
    );
    if out.wins > 0 {
        println!(
            "avg steps (winning games): {:.2}",
            out.steps_win as f64 / out.wins as f64
        );
    }
    Ok(())
}

fn cmd_certify(checkpoint: &PathBuf, env_id: &str) -> anyhow::Result<bool> {
    let env = EnvKind::parse(env_id)?;
    let (stored, policy) = load_checkpoint(checkpoint)?;
    if stored != env {
        bail!("checkpoint was trained on {stored}, not {env}");
    }
    match policy {
        LoadedPolicy::Tabular(p) => {
            let fl = env.frozenlake_spec().expect("grid world");
            let mdp = frozenlake_as_mdp(&fl, false)?;
            let baseline = p.step(1).baseline().clone();
            let oracle = solve_optimal(&mdp, &baseline, p.horizon(), p.tau(), 1.0)?;
            let reports = certify(&mdp, &p, &oracle, 1e-6, LAMBDA_CUT_REL)?;
            println!("block  residual_max  lambda_min  policy_gap  pass");
            let mut all = true;
            for r in &reports {
                println!(
                    "{:>5}  {:>12.3e}  {:>10.3e}  {:>10.3e}  {}",
                    r.m, r.residual_max, r.lambda_min_retained, r.policy_gap_max, r.pass
                );
                all &= r.pass;
            }
            Ok(all)
        }
        LoadedPolicy::Neural(p) => {
            // tangent-kernel certificate: the full (action, state) grid
            // on the grid worlds, a fixed state sample on CartPole
            let mut inputs = Vec::new();
            if let Some(fl) = env.frozenlake_spec() {
                let fl = if p.state_dim == fl.n_states() {
                    fl.with_one_hot()
                } else {
                    fl
                };
                for s in 0..fl.n_states() {
                    let enc = fl.encode_cell(s);
                    for a in 0..p.n_actions {
                        inputs.push(p.encode(a, &enc, p.horizon));
                    }
                }
            } else {
                let env = CartPole::default();
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                for _ in 0..32 {
                    let state = env.reset(&mut rng);
                    let enc = env.encode(&state);
                    for a in 0..p.n_actions {
                        inputs.push(p.encode(a, &enc, p.horizon));
                    }
                }
            }
            let gram = ntk_gram(&p.nets[0], &inputs, mpg_core::neural::NTK_TOL)?;
            let floor = 100.0 * f64::EPSILON * gram.max_eig;
            let pass = gram.min_eig > floor;
            println!(
                "tangent kernel on {} inputs: min eig {:.3e}, max eig {:.3e}, noise floor {:.3e}, strictly positive: {}",
                inputs.len(),
                gram.min_eig,
                gram.max_eig,
                floor,
                pass
            );
            Ok(pass)
        }
    }
}

fn cmd_verify(level: &str) -> anyhow::Result<bool> {
    let level = VerifyLevel::parse(level)?;
    let report = verify_suite(level);
    print!("{}", report.render(level == VerifyLevel::Full));
    Ok(report.all_pass)
}

fn cmd_report(dir: &PathBuf) -> anyhow::Result<()> {
    let spec: ExperimentSpec = serde_json::from_str(
        &std::fs::read_to_string(dir.join("spec.json"))
            .with_context(|| format!("no spec.json in {}", dir.display()))?,
    )?;
    let rows = rows_from_results_csv(
        &std::fs::read_to_string(dir.join("results.csv"))
            .with_context(|| format!("no results.csv in {}", dir.display()))?,
    )?;
    let report = markdown_report(&spec.name, spec.environment, &rows);
    std::fs::write(dir.join("report.md"), &report)?;
    print!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> anyhow::Result<bool> {
        init_workers()?;
        match &cli.command {
            Command::Train { config } => cmd_train(config).map(|()| true),
            Command::Evaluate {
                checkpoint,
                env,
                games,
                seed,
            } => cmd_evaluate(checkpoint, env, *games, *seed).map(|()| true),
            Command::Certify { checkpoint, env } => cmd_certify(checkpoint, env),
            Command::Verify { level } => cmd_verify(level),
            Command::Report { results_dir } => cmd_report(results_dir).map(|()| true),
        }
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
