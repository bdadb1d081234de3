use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deformsim::engine::{bisect, simulate};
use deformsim::output::{emit_outputs, verify_dir, write_waypoints, RunSummary};
use deformsim::safety::SafetyReport;
use deformsim::scenario::Scenario;
use deformsim::Error;

const EXIT_UNSAFE: u8 = 2;
const EXIT_SCENARIO: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "deformsim", version, about = "Plan, simulate and safety-check leader-follower quadcopter teams")]
struct Cli {
    /// Root directory for outputs when `--out` is not given.
    #[arg(long, env = "DEFORMSIM_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario at its configured travel time.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write only the tables needed for re-verification.
        #[arg(long)]
        no_plot_data: bool,
    },
    /// Search for the minimum safe travel time and simulate at it.
    Bisect {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_plot_data: bool,
    },
    /// Recompute the safety report of a persisted run.
    Verify { trace_dir: PathBuf },
    /// Plan waypoints and segment times only.
    Plan {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Scenario { .. } => EXIT_SCENARIO,
        Error::InitialTimeUnsafe { .. } => EXIT_UNSAFE,
        _ => EXIT_RUNTIME,
    }
}

fn output_dir(out: Option<PathBuf>, root: &Path, scenario: &Path) -> PathBuf {
    out.unwrap_or_else(|| {
        let stem = scenario.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        root.join(stem)
    })
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, Error> {
    let s = Scenario::load(path)?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn print_report(report: &SafetyReport) {
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    println!(
        "rotor speeds: {} (max {} rad/s at agent {} rotor {} t = {} s; min {}; limit {})",
        verdict(report.rotor.ok),
        report.rotor.max_speed,
        report.rotor.max_agent + 1,
        report.rotor.max_rotor + 1,
        report.rotor.max_time,
        report.rotor.min_speed,
        report.rotor.omega_max
    );
    println!(
        "tracking: {} (max {} m at agent {} t = {} s; limit {})",
        verdict(report.tracking.ok),
        report.tracking.max_error,
        report.tracking.max_agent + 1,
        report.tracking.max_time,
        report.tracking.delta
    );
}

fn finish(summary: &RunSummary, dir: &Path) -> ExitCode {
    print_report(&summary.report);
    if let Some(a) = &summary.abort {
        println!("aborted at step {} (t = {} s): {}", a.step, a.time, a.cause);
    }
    println!("outputs: {}", dir.display());
    if summary.abort.is_some() {
        ExitCode::from(EXIT_RUNTIME)
    } else if summary.safe {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_UNSAFE)
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            no_plot_data,
        } => {
            let s = load(&scenario, seed)?;
            let dir = output_dir(out, &cli.out_root, &scenario);
            let plan = s.plan()?;
            println!("waypoints: {}, travel time {} s", plan.waypoints.len(), plan.total_time);
            let run = simulate(&s, &plan)?;
            let summary = emit_outputs(&dir, &s, &plan, &run, None, !no_plot_data)?;
            Ok(finish(&summary, &dir))
        }
        Command::Bisect {
            scenario,
            seed,
            out,
            no_plot_data,
        } => {
            let s = load(&scenario, seed)?;
            let dir = output_dir(out, &cli.out_root, &scenario);
            let (plan, result) = bisect(&s)?;
            for step in &result.transcript {
                println!(
                    "T = {} s: {}{}",
                    step.travel_time,
                    if step.safe { "safe" } else { "unsafe" },
                    step.reason.as_deref().map(|r| format!(" ({r})")).unwrap_or_default()
                );
            }
            println!("minimum safe travel time: {} s", result.travel_time);
            let run = simulate(&s, &plan)?;
            let summary = emit_outputs(&dir, &s, &plan, &run, Some(&result), !no_plot_data)?;
            Ok(finish(&summary, &dir))
        }
        Command::Verify { trace_dir } => {
            let v = verify_dir(&trace_dir)?;
            print_report(&v.recomputed);
            if !v.matches() {
                eprintln!("recomputed report differs from the recorded one");
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
            println!("report matches the recorded summary");
            if let Some(a) = &v.abort {
                println!("run was aborted at step {}: {}", a.step, a.cause);
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
            Ok(if v.safe() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_UNSAFE)
            })
        }
        Command::Plan { scenario, out } => {
            let s = load(&scenario, None)?;
            let dir = output_dir(out, &cli.out_root, &scenario);
            let plan = s.plan()?;
            for (w, t) in plan.waypoints.iter().zip(std::iter::once(&0.0).chain(&plan.segment_times)) {
                println!("({}, {}, {})  segment {} s", w.x, w.y, w.z, t);
            }
            println!("path length {} m", plan.path_length());
            write_waypoints(&dir, &plan)?;
            println!("outputs: {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
