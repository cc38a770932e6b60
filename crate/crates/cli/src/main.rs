use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use lockstep_pool::allocator::{
    brute_force_map_with, map_threads_with, AllocatorConfig, Objective, PerformanceProfile,
};
use lockstep_pool::faultsim::{run, RunError, RunOutput, ScenarioConfig, ScenarioError};
use lockstep_pool::mapping::SystemMapping;
use lockstep_pool::model::{ThreadSpec, Tile};
use lockstep_pool::trace::write_ndjson;
use lockstep_pool::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_ESSENTIAL_LOST: u8 = 3;
const EXIT_ORACLE_TOO_LARGE: u8 = 4;

/// Scenarios shipped with the binary, usable by name instead of a path.
const BUILTIN_SCENARIOS: [(&str, &str); 5] = [
    ("fig3a", include_str!("../../../scenarios/fig3a.json")),
    ("fig3b", include_str!("../../../scenarios/fig3b.json")),
    ("fig3c", include_str!("../../../scenarios/fig3c.json")),
    ("baseline", include_str!("../../../scenarios/baseline.json")),
    (
        "stochastic",
        include_str!("../../../scenarios/stochastic.json"),
    ),
];

#[derive(Parser)]
#[command(
    name = "lockstep-pool",
    version,
    about = "Replicated tile pool simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace and report.
    Run {
        /// Scenario file, or the name of a built-in scenario.
        scenario: String,
        /// Overrides the scenario's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Newline-delimited JSON trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON report output. The text report always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Independent runs with consecutive seeds, executed in parallel.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Print the static mapping for a profile without simulating.
    Map {
        scenario: String,
        /// Profile name; defaults to the scenario's profile.
        #[arg(long)]
        profile: Option<String>,
        /// Also search exhaustively and report the objective gap.
        #[arg(long)]
        oracle: bool,
    },
    /// Print the built-in performance profiles.
    Profiles,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LOCKSTEP_POOL_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            trace,
            report,
            runs,
        } => cmd_run(&scenario, seed, trace.as_deref(), report.as_deref(), runs),
        Command::Map {
            scenario,
            profile,
            oracle,
        } => cmd_map(&scenario, profile.as_deref(), oracle),
        Command::Profiles => cmd_profiles(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn invalid(e: &ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    if let ScenarioError::Invalid(fields) = e {
        for f in fields {
            eprintln!("  {}: {}", f.field, f.message);
        }
    }
    ExitCode::from(EXIT_INVALID)
}

fn load(arg: &str, seed: Option<u64>) -> anyhow::Result<Result<ScenarioConfig, ScenarioError>> {
    let path = Path::new(arg);
    let text = if path.exists() {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else if let Some((_, text)) = BUILTIN_SCENARIOS.iter().find(|(n, _)| *n == arg) {
        text.to_string()
    } else {
        anyhow::bail!("no scenario file or built-in scenario named {arg}");
    };
    Ok(ScenarioConfig::from_json(&text, seed))
}

/// Appends `.{index}` to the file name when several runs share one path.
fn numbered(path: &Path, index: u64, runs: u64) -> PathBuf {
    if runs == 1 {
        return path.to_path_buf();
    }
    let mut name = path.as_os_str().to_owned();
    name.push(format!(".{index}"));
    PathBuf::from(name)
}

fn cmd_run(
    arg: &str,
    seed: Option<u64>,
    trace: Option<&Path>,
    report: Option<&Path>,
    runs: u64,
) -> anyhow::Result<ExitCode> {
    let scenario = match load(arg, seed)? {
        Ok(s) => s,
        Err(e) => return Ok(invalid(&e)),
    };
    let base = seed.or(scenario.rng_seed).unwrap_or(0);
    let outputs: Vec<Result<RunOutput, RunError>> = (0..runs.max(1))
        .into_par_iter()
        .map(|i| run(&scenario, Some(base.wrapping_add(i))))
        .collect();
    let mut reports = Vec::new();
    let mut lost = false;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, result) in outputs.into_iter().enumerate() {
        let o = match result {
            Ok(o) => o,
            Err(RunError::Scenario(e)) => return Ok(invalid(&e)),
            Err(e) => return Err(e.into()),
        };
        info!("run {i} finished with {} trace records", o.trace.len());
        if let Some(path) = trace {
            let path = numbered(path, i as u64, runs);
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_ndjson(io::BufWriter::new(file), &o.trace)?;
        }
        if i > 0 {
            writeln!(out)?;
        }
        write!(out, "{}", o.report.to_text())?;
        lost |= !o.report.essential_descheduled.is_empty();
        reports.push(o.report);
    }
    if let Some(path) = report {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if lost {
        ExitCode::from(EXIT_ESSENTIAL_LOST)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_mapping(out: &mut impl Write, m: &SystemMapping, tiles: &[Tile]) -> io::Result<()> {
    for (thread, a) in &m.assignments {
        let hosts: Vec<String> = a.tiles.iter().map(|t| t.0.to_string()).collect();
        writeln!(
            out,
            "  {:<8} {:<10} tiles [{}] share {}",
            thread.to_string(),
            a.mode.to_string(),
            hosts.join(","),
            a.time_share
        )?;
    }
    let gated: Vec<String> = tiles
        .iter()
        .filter(|t| !m.active_tiles.contains(&t.id))
        .map(|t| t.id.0.to_string())
        .collect();
    let idle: Vec<String> = m.idle_gated.iter().map(|t| t.0.to_string()).collect();
    writeln!(out, "  gated tiles: [{}]", gated.join(","))?;
    writeln!(out, "  idle-gated tiles: [{}]", idle.join(","))
}

fn print_objective(out: &mut impl Write, o: &Objective) -> io::Result<()> {
    let tiers: Vec<String> = ["E", "H", "M", "L"]
        .iter()
        .zip(&o.tiers)
        .map(|(c, (share, replicas))| format!("{c} {share}/{replicas}"))
        .collect();
    writeln!(
        out,
        "  objective: share/replicas {} power {:.3} W",
        tiers.join(" "),
        lockstep_pool::energy::to_f64(&o.power) * 1e-6
    )
}

fn cmd_map(arg: &str, profile: Option<&str>, oracle: bool) -> anyhow::Result<ExitCode> {
    let scenario = match load(arg, None)? {
        Ok(s) => s,
        Err(e) => return Ok(invalid(&e)),
    };
    let profile = match profile {
        Some(name) => match PerformanceProfile::builtin(name) {
            Ok(p) => p.with_budget(scenario.power_budget_mw),
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        },
        None => match scenario.build_profile() {
            Ok(p) => p,
            Err(e) => return Ok(invalid(&e)),
        },
    };
    let tiles = scenario.build_tiles();
    let threads: Vec<ThreadSpec> = scenario.threads.clone();
    let cfg = AllocatorConfig {
        power: scenario.power,
        frequency_levels: scenario.frequency_levels(),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "profile {}", profile.name)?;
    let heuristic = match map_threads_with(&threads, &tiles, &profile, &cfg) {
        Ok(m) => {
            let power = cfg.power.system_power(&tiles, &m, &threads);
            let objective = Objective::of(&m, &threads, power);
            writeln!(out, "heuristic mapping:")?;
            print_mapping(&mut out, &m, &tiles)?;
            print_objective(&mut out, &objective)?;
            Some(objective)
        }
        Err(e) => {
            writeln!(out, "heuristic: infeasible ({e})")?;
            None
        }
    };
    if oracle {
        match brute_force_map_with(&threads, &tiles, &profile, &cfg) {
            Err(e @ Error::OracleTooLarge { .. }) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(EXIT_ORACLE_TOO_LARGE));
            }
            Err(e) => return Err(e.into()),
            Ok(None) => writeln!(out, "oracle: infeasible")?,
            Ok(Some(best)) => {
                writeln!(out, "oracle mapping:")?;
                print_mapping(&mut out, &best.mapping, &tiles)?;
                print_objective(&mut out, &best.objective)?;
                if let Some(h) = heuristic {
                    writeln!(out, "gap: {:.2}%", 100.0 * h.gap_to(&best.objective))?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profiles() -> anyhow::Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for p in PerformanceProfile::builtins() {
        for row in p.rows() {
            writeln!(out, "{row}")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
