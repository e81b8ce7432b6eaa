//! Command-line driver for periodic risk-averse policy optimization.
//!
//! Subcommands cover the full loop: simulate noise, solve the offline
//! periodic problem, re-solve transiently from a realized history, evaluate
//! a stored rule in closed loop, and price a scenario-tree baseline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solve did not converge,
//! 4 simulation divergence, 5 missing input file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use pamar_control::config::{apply_overrides, parse_config, RunConfig};
use pamar_control::io::{load_solution, save_solution, write_ensemble_csv, write_rolling_csv};
use pamar_control::nalgebra::DVector;
use pamar_control::pamar::History;
use pamar_control::solver::{
    rolling_evaluate, solve_offline, solve_transient, solve_tree_baseline, PolicyMode,
    RollingOptions,
};
use pamar_control::Error;

#[derive(Parser)]
#[command(
    name = "pamarctl",
    about = "Risk-averse periodic control with seasonal autoregressive noise",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the periodic offline problem and store the decision rule.
    SolveOffline(SolveOfflineArgs),
    /// Re-solve a finite window from a realized noise history.
    SolveTransient(SolveTransientArgs),
    /// Roll a stored rule forward on held-out noise.
    Evaluate(EvaluateArgs),
    /// Price a short horizon with a scenario-tree search (expectation risk).
    Baseline(BaselineArgs),
    /// Simulate noise paths to CSV.
    SimulateNoise(SimulateNoiseArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to `out_dir` in the config, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path config override, e.g. `solver.num_scenarios=500`.
    /// May repeat.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SolveOfflineArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SolveTransientArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Offline solution to warm-start from and pin the terminal to.
    #[arg(long)]
    solution: PathBuf,
    /// Absolute start time of the window (≥ burn-in cycles × period; the
    /// realized history before it is simulated from the held-out seed).
    #[arg(long)]
    start_time: u64,
    /// Window length in stages.
    #[arg(long)]
    window: usize,
    /// Current state, comma-separated. Defaults to the offline per-phase
    /// mean at the start time.
    #[arg(long, value_delimiter = ',')]
    state: Option<Vec<f64>>,
    /// Seed for the simulated realized history (defaults to seed + 1).
    #[arg(long)]
    history_seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Stored solution to evaluate.
    #[arg(long)]
    solution: PathBuf,
    /// Master cycles to roll forward.
    #[arg(long, default_value_t = 3)]
    cycles: usize,
    /// Independent noise replications.
    #[arg(long, default_value_t = 100)]
    replications: usize,
    /// `offline` applies the stored rule; `transient` re-solves each step.
    #[arg(long, default_value = "offline")]
    mode: String,
    /// Lookahead window for `--mode transient`.
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Seed for the held-out noise (defaults to seed + 1).
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Tree depth in stages.
    #[arg(long)]
    depth: usize,
    /// Children per node.
    #[arg(long, default_value_t = 3)]
    branching: usize,
    /// Grid points per control dimension.
    #[arg(long, default_value_t = 5)]
    grid_points: usize,
}

#[derive(Args)]
struct SimulateNoiseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of paths.
    #[arg(long, default_value_t = 100)]
    paths: usize,
    /// Path length in stages (defaults to one master cycle).
    #[arg(long)]
    length: Option<usize>,
    /// Burn-in master cycles before retention.
    #[arg(long, default_value_t = 3)]
    burn_in: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SolveOffline(args) => run_solve_offline(args),
        Command::SolveTransient(args) => run_solve_transient(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Baseline(args) => run_baseline(args),
        Command::SimulateNoise(args) => run_simulate_noise(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitCode::from(5),
        Error::Io(_) => ExitCode::from(1),
        Error::Config(_) | Error::Invalid(_) | Error::Format(_) => ExitCode::from(2),
        Error::Divergence(_) => ExitCode::from(4),
    }
}

/// Loads the config with overrides applied; returns the resolved TOML text
/// alongside the parsed form.
fn load(common: &CommonArgs) -> Result<(RunConfig, String), Error> {
    let raw = std::fs::read_to_string(&common.config)?;
    let mut text = apply_overrides(&raw, &common.overrides)?;
    let mut config = parse_config(&text)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
        text = apply_overrides(&text, &[format!("seed={seed}")])?;
    }
    Ok((config, text))
}

fn out_dir(common: &CommonArgs, config: &RunConfig) -> Result<PathBuf, Error> {
    let dir = common
        .out
        .clone()
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Reproducibility record: the resolved configuration, its digest, and the
/// exact invocation. Kept separate from the solution file so the solution
/// stays byte-stable across identical runs from different paths.
fn write_manifest(
    dir: &Path,
    command: &str,
    common: &CommonArgs,
    config: &RunConfig,
    resolved: &str,
) -> Result<(), Error> {
    let digest = Sha256::digest(resolved.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = serde_json::json!({
        "command": command,
        "config_path": common.config.display().to_string(),
        "config_sha256": hex,
        "seed": config.seed,
        "overrides": common.overrides,
        "package_version": env!("CARGO_PKG_VERSION"),
        "resolved_config": resolved,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("run_manifest.json"), text + "\n")?;
    Ok(())
}

fn run_solve_offline(args: &SolveOfflineArgs) -> Result<ExitCode, Error> {
    let (config, resolved) = load(&args.common)?;
    let dir = out_dir(&args.common, &config)?;
    let problem = config.build_problem()?;
    let basis = config.build_basis()?;
    let settings = config.solver_settings();

    let solution = solve_offline(&problem, &basis, &settings)?;
    let d = &solution.diagnostics;
    println!(
        "objective {:.6}  risk {:.6}  chance {:.6}  wrap_gap {:.3e}  iterations {}  rounds {}  {}",
        d.objective, d.risk_term, d.chance_term, d.wrap_gap, d.iterations, d.picard_rounds,
        d.termination
    );

    let path = dir.join("solution.json");
    save_solution(&path, &problem.kind, &solution)?;
    write_manifest(&dir, "solve-offline", &args.common, &config, &resolved)?;
    println!("wrote {}", path.display());

    if !d.converged {
        eprintln!("warning: solve did not converge ({})", d.termination);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_solve_transient(args: &SolveTransientArgs) -> Result<ExitCode, Error> {
    let (config, resolved) = load(&args.common)?;
    let dir = out_dir(&args.common, &config)?;
    let problem = config.build_problem()?;
    let settings = config.solver_settings();
    let (kind, offline) = load_solution(&args.solution)?;
    if kind != problem.kind {
        return Err(Error::config(format!(
            "solution was trained on `{kind}` but the config builds `{}`",
            problem.kind
        )));
    }

    let period = problem.period();
    let burn = settings.burn_in_cycles as u64 * period;
    if args.start_time < burn {
        return Err(Error::config(format!(
            "start_time {} is inside the burn-in ({} cycles of {})",
            args.start_time, settings.burn_in_cycles, period
        )));
    }
    if args.window == 0 {
        return Err(Error::config("window must be positive"));
    }

    // Realize a history on a held-out stream up to the window start.
    let history_seed = args.history_seed.unwrap_or(config.seed.wrapping_add(1));
    let lead = (args.start_time - burn) as usize;
    let history = if lead == 0 {
        let ens = problem
            .noise
            .simulate_ensemble(1, period as usize, settings.burn_in_cycles, history_seed)?;
        ens.paths[0].history.clone()
    } else {
        let ens = problem
            .noise
            .simulate_ensemble(1, lead, settings.burn_in_cycles, history_seed)?;
        let p = &ens.paths[0];
        History {
            values: p.history.values.iter().chain(p.values.iter()).cloned().collect(),
            innovations: p
                .history
                .innovations
                .iter()
                .chain(p.innovations.iter())
                .cloned()
                .collect(),
        }
    };

    let phase = problem.calendar().phase(args.start_time);
    let state = match &args.state {
        Some(v) => DVector::from_column_slice(v),
        None => offline.per_phase.mean(phase).clone(),
    };
    if state.len() != problem.dynamics.state_dim() {
        return Err(Error::config(format!(
            "state has {} entries but the problem has {} state dimensions",
            state.len(),
            problem.dynamics.state_dim()
        )));
    }

    let sol = solve_transient(
        &problem,
        &offline,
        args.start_time,
        args.window,
        &history,
        &state,
        &settings,
    )?;
    println!(
        "first control [{}]  objective {:.6}  iterations {}  {}",
        sol.first_control
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", "),
        sol.objective.total,
        sol.iterations,
        sol.termination
    );

    let out = serde_json::json!({
        "start_time": args.start_time,
        "window": args.window,
        "state": state.iter().copied().collect::<Vec<f64>>(),
        "first_control": sol.first_control.iter().copied().collect::<Vec<f64>>(),
        "objective": sol.objective.total,
        "risk_term": sol.objective.risk_term,
        "chance_term": sol.objective.chance_term,
        "terminal_term": sol.objective.terminal_term,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "termination": sol.termination,
    });
    let text =
        serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("transient.json"), text + "\n")?;
    write_manifest(&dir, "solve-transient", &args.common, &config, &resolved)?;

    if !sol.converged {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_evaluate(args: &EvaluateArgs) -> Result<ExitCode, Error> {
    let (config, resolved) = load(&args.common)?;
    let dir = out_dir(&args.common, &config)?;
    let problem = config.build_problem()?;
    let settings = config.solver_settings();
    let (kind, solution) = load_solution(&args.solution)?;
    if kind != problem.kind {
        return Err(Error::config(format!(
            "solution was trained on `{kind}` but the config builds `{}`",
            problem.kind
        )));
    }

    let mode = match args.mode.as_str() {
        "offline" => PolicyMode::Offline,
        "transient" => {
            if args.window == 0 {
                return Err(Error::config("--mode transient requires --window > 0"));
            }
            PolicyMode::Transient {
                window: args.window,
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown mode `{other}` (expected `offline` or `transient`)"
            )))
        }
    };
    let options = RollingOptions {
        cycles: args.cycles,
        replications: args.replications,
        mode,
        seed: args.eval_seed.unwrap_or(config.seed.wrapping_add(1)),
        burn_in_cycles: settings.burn_in_cycles,
        initial_state: settings
            .initial_state
            .as_ref()
            .map(|v| DVector::from_column_slice(v)),
    };
    let report = rolling_evaluate(&problem, &solution, &options, &settings)?;
    println!(
        "loss per cycle [{}]  violation frequency {:.4}",
        report
            .loss_per_cycle
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
        report.violation_frequency
    );

    let period = report.per_phase.period();
    let summary = serde_json::json!({
        "cycles": args.cycles,
        "replications": args.replications,
        "mode": args.mode,
        "loss_per_cycle": report.loss_per_cycle,
        "violation_frequency": report.violation_frequency,
        "per_stage_violations": report.per_stage_violations,
        "per_phase_mean": (0..period)
            .map(|tau| report.per_phase.mean(tau).iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
        "per_phase_std": (0..period)
            .map(|tau| report.per_phase.std(tau).iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    });
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("evaluation.json"), text + "\n")?;
    write_rolling_csv(&dir.join("trajectories.csv"), &report)?;
    write_manifest(&dir, "evaluate", &args.common, &config, &resolved)?;
    println!("wrote {}", dir.join("evaluation.json").display());
    Ok(ExitCode::SUCCESS)
}

fn run_baseline(args: &BaselineArgs) -> Result<ExitCode, Error> {
    let (config, resolved) = load(&args.common)?;
    let dir = out_dir(&args.common, &config)?;
    let problem = config.build_problem()?;
    let settings = config.solver_settings();
    let tree = solve_tree_baseline(
        &problem,
        &settings,
        args.depth,
        args.branching,
        args.grid_points,
    )?;
    println!(
        "tree objective {:.6}  first control [{}]  nodes {}",
        tree.objective,
        tree.first_control
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", "),
        tree.nodes
    );
    let out = serde_json::json!({
        "depth": args.depth,
        "branching": args.branching,
        "grid_points": args.grid_points,
        "objective": tree.objective,
        "first_control": tree.first_control.iter().copied().collect::<Vec<f64>>(),
        "nodes": tree.nodes,
    });
    let text =
        serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("baseline.json"), text + "\n")?;
    write_manifest(&dir, "baseline", &args.common, &config, &resolved)?;
    Ok(ExitCode::SUCCESS)
}

fn run_simulate_noise(args: &SimulateNoiseArgs) -> Result<ExitCode, Error> {
    let (config, resolved) = load(&args.common)?;
    let dir = out_dir(&args.common, &config)?;
    let problem = config.build_problem()?;
    let length = args.length.unwrap_or(problem.period() as usize);
    let ensemble =
        problem
            .noise
            .simulate_ensemble(args.paths, length, args.burn_in, config.seed)?;
    if ensemble.divergence.diverged {
        return Err(Error::Divergence(format!(
            "simulated noise diverged: {:?}",
            ensemble.divergence
        )));
    }
    let path = dir.join("noise.csv");
    write_ensemble_csv(&path, &ensemble.paths)?;
    write_manifest(&dir, "simulate-noise", &args.common, &config, &resolved)?;
    println!(
        "wrote {} ({} paths × {} steps)",
        path.display(),
        args.paths,
        length
    );
    Ok(ExitCode::SUCCESS)
}
