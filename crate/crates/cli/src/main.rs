use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmpc::ccm::reference_vectors_json;
use dmpc::sim::{export_trace, run_scenario, Scenario, ScenarioError, SimError};

/// Distributed MPC intersection simulator.
#[derive(Parser)]
#[command(name = "dmpc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file (or a preset name) and print its summary.
    ///
    /// Exits 0 when the pair distance never dropped below `d_safe`, 1 when it
    /// did or a solver failed, and 2 when the configuration is invalid.
    Run {
        scenario: String,
        /// Directory for per-agent CSV traces and `summary.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `path=value`, e.g. `agents.1.v_ref=15` or `noise.enabled=true`.
        /// Agents are addressed by id.
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Check a scenario file without running it.
    Validate {
        scenario: String,
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Write the reference CCM byte vectors as JSON.
    CcmVectors { out: PathBuf },
    /// Print a built-in scenario (`scenario1`, `scenario2`) as JSON.
    Preset { name: String },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load(arg: &str, overrides: &[String]) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    let json = if path.exists() {
        fs::read_to_string(path).map_err(|e| Failure::Config(format!("{arg}: {e}")))?
    } else if let Some(sc) = Scenario::preset(arg) {
        sc.to_json_pretty()
    } else {
        return Err(Failure::Config(format!("{arg}: no such file or preset")));
    };
    Ok(Scenario::from_json_with_overrides(&json, overrides)?)
}

fn run(
    arg: &str,
    out: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<bool, Failure> {
    let mut sc = load(arg, overrides)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let trace = run_scenario(&sc).map_err(|e| match e {
        SimError::Scenario(e) => e.into(),
        e => Failure::Run(e.to_string()),
    })?;
    let summary = match out {
        Some(dir) => export_trace(&trace, dir)
            .map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?,
        None => trace.summary(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(summary.min_dist_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            overrides,
        } => run(&scenario, out.as_deref(), seed, &overrides),
        Command::Validate {
            scenario,
            overrides,
        } => load(&scenario, &overrides).map(|sc| {
            println!(
                "{}: ok ({} agents, {} steps)",
                sc.name,
                sc.agents.len(),
                sc.steps()
            );
            true
        }),
        Command::CcmVectors { out } => fs::write(&out, reference_vectors_json())
            .map(|_| true)
            .map_err(|e| Failure::Run(format!("{}: {e}", out.display()))),
        Command::Preset { name } => match Scenario::preset(&name) {
            Some(sc) => {
                println!("{}", sc.to_json_pretty());
                Ok(true)
            }
            None => Err(Failure::Config(format!("unknown preset {name:?}"))),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: minimum distance fell below d_safe");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
