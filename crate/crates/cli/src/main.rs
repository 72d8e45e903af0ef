//! `legged`: run locomotion scenarios, list gaits and sweep parameters.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 the robot fell,
//! 3 the simulation diverged or the controller failed.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use legged_core::gait::{gait_by_name, gait_library, GaitSpec};
use legged_core::harness::{max_stable_value, run_closed_loop, sweep, write_log, HarnessError, RunOutcome, Scenario};

#[derive(Parser)]
#[command(name = "legged", version, about = "Quadruped MPC + WBIC locomotion runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario in closed loop.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// CSV log output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics JSON output.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override the scenario duration (s).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// List bundled gaits.
    Gaits {
        #[arg(long)]
        name: Option<String>,
    },
    /// Run a scenario once per parameter value.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// One of cmd.vx, cmd.vy, cmd.yaw_rate, cmd.body_height, duration.
        /// Defaults to the scenario's `sweep.param`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values. Defaults to the scenario's `sweep.values`.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        values: Option<String>,
        /// Sweep table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_FALL: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, HarnessError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| HarnessError::Io { path: path.clone(), source })
}

fn print_gait(g: &GaitSpec) {
    let fmt = |v: &[f64; 4]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    println!(
        "{:<13} T={:<5} offsets=({}) stance=({})",
        g.name,
        g.cycle_duration,
        fmt(&g.offsets),
        fmt(&g.stance_fractions)
    );
}

fn run(scenario: PathBuf, out: Option<PathBuf>, metrics: Option<PathBuf>, duration: Option<f64>) -> ExitCode {
    let mut sc = match Scenario::load(&scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(d) = duration {
        sc.duration = d;
        if let Err(e) = sc.validate() {
            return fail(e);
        }
    }
    let model = match sc.model() {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let result = match run_closed_loop(&model, &sc) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Some(path) = &out {
        if let Err(e) = create(path).and_then(|w| write_log(w, &result.records)) {
            return fail(e);
        }
    }
    let report = result.report(&sc);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &metrics {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &json) {
                return fail(format!("cannot write {}: {e}", path.display()));
            }
        }
        None => println!("{json}"),
    }
    match &result.outcome {
        RunOutcome::Completed => ExitCode::SUCCESS,
        RunOutcome::Fell { t } => {
            eprintln!("robot fell at t = {t:.3} s");
            ExitCode::from(EXIT_FALL)
        }
        RunOutcome::Diverged { message, .. } | RunOutcome::ControllerFailed { message, .. } => {
            eprintln!("{message}");
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}

fn parse_values(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|e| format!("bad sweep value `{v}`: {e}")))
        .collect()
}

fn run_sweep(scenario: PathBuf, param: Option<String>, values: Option<String>, out: Option<PathBuf>) -> ExitCode {
    let sc = match Scenario::load(&scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let Some(param) = param.or_else(|| sc.sweep.as_ref().map(|s| s.param.clone())) else {
        return fail("--param is required when the scenario has no sweep block");
    };
    let values = match values {
        Some(text) => match parse_values(&text) {
            Ok(v) => v,
            Err(e) => return fail(e),
        },
        None => sc.sweep.as_ref().map(|s| s.values.clone()).unwrap_or_default(),
    };
    if values.is_empty() {
        return fail("--values must list at least one value");
    }
    let rows = match sweep(&sc, &param, &values) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    println!("{:>8}  {:>8}  {:>10}  {:>10}  {:>10}", param, "stable", "outcome", "v_fwd", "v_err");
    for r in &rows {
        let kind = match &r.outcome {
            RunOutcome::Completed => "completed",
            RunOutcome::Fell { .. } => "fell",
            RunOutcome::Diverged { .. } => "diverged",
            RunOutcome::ControllerFailed { .. } => "failed",
        };
        let (v, e) = r
            .metrics
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |m| (m.mean_forward_velocity, m.mean_forward_velocity_error));
        println!("{:>8.3}  {:>8}  {:>10}  {:>10.3}  {:>10.3}", r.value, r.stable, kind, v, e);
    }
    match max_stable_value(&rows) {
        Some(v) => println!("max stable {param}: {v}"),
        None => println!("no stable value"),
    }
    if let Some(path) = &out {
        let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
        if let Err(e) = std::fs::write(path, json) {
            return fail(format!("cannot write {}: {e}", path.display()));
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            metrics,
            duration,
        } => run(scenario, out, metrics, duration),
        Command::Gaits { name: None } => {
            gait_library().iter().for_each(print_gait);
            ExitCode::SUCCESS
        }
        Command::Gaits { name: Some(n) } => match gait_by_name(&n) {
            Ok(g) => {
                print_gait(&g);
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Sweep {
            scenario,
            param,
            values,
            out,
        } => run_sweep(scenario, param, values, out),
    }
}
