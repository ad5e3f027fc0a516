//! `wallmpc` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 insufficient
//! excitation for identification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use wallmpc::bench::bench_on;
use wallmpc::identification::{identify, samples_from_log, IdError, IdOptions};
use wallmpc::sim::experiment::{
    run_grid, sim_config_from_str, write_json, write_rows_csv, ExperimentSpec, ReportFormat, SummaryRow, TimingRow,
};
use wallmpc::sim::{simulate, SimConfig, SimError, SimLog};

/// Environment variable naming the root directory for outputs.
const OUT_ENV: &str = "WALLMPC_OUT";

#[derive(Parser)]
#[command(name = "wallmpc", version, about = "Near-wall quadrotor MPC simulation and identification")]
struct Cli {
    /// Output root (overrides WALLMPC_OUT; default ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its log and metrics.
    Run {
        config: PathBuf,
        /// Run directory name (default: config file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run a controller × k_s × seed grid and write a summary table.
    Compare {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fit (k_s, d_thr) to a simulation log.
    Identify {
        log: PathBuf,
        /// Simulation config supplying walls, vehicle and rotor layout
        /// (default: config.json beside the log).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        ks0: f64,
        #[arg(long, default_value_t = 0.2)]
        dthr0: f64,
    },
    /// Time warm-started MPC solves over a closed-loop trace.
    Bench {
        /// Simulation config for the trace (default: built-in wall circle).
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        solves: usize,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Excitation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Input(_) => 2,
            CliError::Excitation(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { .. } | SimError::Trajectory(_) | SimError::Csv { .. } => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<SimConfig, CliError> {
    sim_config_from_str(&read_input(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn output_root(cli_out: Option<PathBuf>) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn write_run(dir: &Path, cfg: &SimConfig, log: &SimLog, metrics: &impl Serialize, name: &str) -> Result<(), CliError> {
    create_dir(dir)?;
    log.save(&dir.join("log.csv"))?;
    write_json(&dir.join("metrics.json"), metrics)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("timing.json"), &TimingRow::new(name, log))?;
    Ok(())
}

fn cmd_run(root: &Path, config: &Path, name: Option<String>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let name = name.unwrap_or_else(|| file_stem(config));
    let (log, metrics) = simulate(&cfg)?;
    let dir = root.join(&name);
    write_run(&dir, &cfg, &log, &metrics, &name)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(root: &Path, spec_path: &Path, jobs: usize) -> Result<(), CliError> {
    let spec = read_input(spec_path)?
        .parse::<ExperimentSpec>()
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let runs = spec
        .expand()
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let dir = root.join(spec.output_dir.clone().unwrap_or_else(|| spec.name.clone()));
    create_dir(&dir)?;

    let outcomes = run_grid(runs, jobs);
    let mut summary = Vec::with_capacity(outcomes.len());
    let mut timing = Vec::new();
    for outcome in &outcomes {
        summary.push(SummaryRow::new(&outcome.spec, &outcome.result));
        match &outcome.result {
            Ok((log, metrics)) => {
                timing.push(TimingRow::new(&outcome.spec.name, log));
                if spec.write_logs {
                    write_run(&dir.join(&outcome.spec.name), &outcome.spec.config, log, metrics, &outcome.spec.name)?;
                }
            }
            Err(e) => eprintln!("run {} failed: {e}", outcome.spec.name),
        }
    }
    if matches!(spec.format, ReportFormat::Csv | ReportFormat::Both) {
        write_rows_csv(&dir.join("summary.csv"), &summary)?;
    }
    if matches!(spec.format, ReportFormat::Json | ReportFormat::Both) {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    write_rows_csv(&dir.join("timing.csv"), &timing)?;

    println!("{:<28} {:>10} {:>10} {:>10} {:>6}", "run", "rmse_x", "rmse_y", "rmse_z", "coll");
    for row in &summary {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.5}"));
        println!(
            "{:<28} {:>10} {:>10} {:>10} {:>6}",
            row.run,
            f(row.rmse_x),
            f(row.rmse_y),
            f(row.rmse_z),
            row.collision_count.map_or_else(|| "-".into(), |c| c.to_string())
        );
    }
    println!("wrote {}", dir.display());
    if summary.iter().all(|r| !r.ok) {
        return Err(CliError::Runtime("every run failed".into()));
    }
    Ok(())
}

fn cmd_identify(root: &Path, log_path: &Path, config: Option<PathBuf>, init: (f64, f64)) -> Result<(), CliError> {
    let log = SimLog::load(log_path).map_err(|e| match e {
        SimError::Io(m) => CliError::Input(m),
        other => CliError::Input(format!("{}: {other}", log_path.display())),
    })?;
    let config_path = config.unwrap_or_else(|| log_path.with_file_name("config.json"));
    let cfg = load_config(&config_path)?;
    let samples = samples_from_log(&log);
    let result = identify(&samples, init, &cfg.planes, &cfg.vehicle, &cfg.suction_true, &IdOptions::default())
        .map_err(|e| match e {
            IdError::InsufficientExcitation { .. } => CliError::Excitation(format!(
                "{e}; fly closer to a wall (within the search range) for longer"
            )),
            IdError::Invalid(m) => CliError::Input(m),
            IdError::Solver(s) => CliError::Runtime(s.to_string()),
        })?;
    let text = serde_json::to_string_pretty(&result).expect("result serializes");
    println!("{text}");
    let dir = root.join("identify");
    create_dir(&dir)?;
    let out = dir.join(format!("{}.json", file_stem(log_path.parent().unwrap_or(log_path))));
    write_json(&out, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bench(root: &Path, config: Option<PathBuf>, solves: usize, horizon: Option<usize>) -> Result<(), CliError> {
    let (name, mut sim) = match &config {
        Some(path) => (file_stem(path), load_config(path)?),
        None => (
            "wall_circle".to_string(),
            wallmpc::bench::bench_scenario(&wallmpc::controller::MpcConfig::default()),
        ),
    };
    if let Some(n) = horizon {
        sim.mpc.horizon = n;
    }
    let result = bench_on(&name, &sim, solves).map_err(CliError::from)?;
    println!(
        "{}: N = {}, {} solves, mean {:.3} ms, median {:.3} ms, p99 {:.3} ms, {:.1}% under 10 ms, {:.2} iterations/solve",
        result.scenario,
        result.horizon,
        result.n_solves,
        result.mean_ms,
        result.median_ms,
        result.p99_ms,
        100.0 * result.under_10ms,
        result.mean_iterations
    );
    let dir = root.join("bench");
    create_dir(&dir)?;
    let out = dir.join(format!("{}_n{}.json", name, result.horizon));
    write_json(&out, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = output_root(cli.out);
    let result = match cli.command {
        Command::Run { config, name } => cmd_run(&root, &config, name),
        Command::Compare { spec, jobs } => cmd_compare(&root, &spec, jobs),
        Command::Identify { log, config, ks0, dthr0 } => cmd_identify(&root, &log, config, (ks0, dthr0)),
        Command::Bench { config, solves, horizon } => cmd_bench(&root, config, solves, horizon),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
