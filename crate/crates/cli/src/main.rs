use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use porohydra::harness::{self, Outcome, RunOptions, Scenario};

/// Coupled moisture, solute and heat transport with hydration memory.
///
/// Scenario names are looked up as files, then in $POROHYDRA_CONFIG_DIR,
/// then among the bundled scenarios (trivial_zero, drying_degenerate,
/// manufactured_smooth, manufactured_constant).
#[derive(Parser)]
#[command(name = "porohydra", version)]
struct Cli {
    /// Worker threads for assembly and diagnostics.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArg {
    /// Scenario file or name.
    #[arg(long)]
    scenario: String,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and check the a-priori bounds.
    Run {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Output directory (default: the scenario's, else out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of time steps, overriding the scenario.
        #[arg(long)]
        n_override: Option<usize>,
        /// Write levels to disk as they are computed.
        #[arg(long)]
        streaming: bool,
    },
    /// Convergence study of the scenario's manufactured case.
    Convergence {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Step counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        /// Mesh resolutions, comma separated.
        #[arg(long, value_delimiter = ',')]
        meshes: Option<Vec<usize>>,
    },
    /// Recompute the diagnostics of a stored trajectory.
    Audit {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long)]
        trajectory: PathBuf,
        /// Where to write the recomputed report (default: next to the trajectory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the material of a scenario against the structural assumptions.
    ValidateModel {
        #[command(flatten)]
        scenario: ScenarioArg,
    },
    /// Print mesh statistics of a scenario.
    MeshInfo {
        #[command(flatten)]
        scenario: ScenarioArg,
    },
}

fn dispatch(cli: Cli) -> porohydra::Result<Outcome> {
    if let Some(n) = cli.threads {
        harness::configure_threads(n)?;
    }
    match cli.command {
        Command::Run {
            scenario,
            out,
            n_override,
            streaming,
        } => harness::cli_run(
            &Scenario::load(&scenario.scenario)?,
            &RunOptions {
                out,
                n_override,
                streaming,
            },
        ),
        Command::Convergence { scenario, out, ns, meshes } => harness::cli_convergence(
            &Scenario::load(&scenario.scenario)?,
            ns.as_deref(),
            meshes.as_deref(),
            out.as_deref(),
        ),
        Command::Audit { scenario, trajectory, out } => {
            harness::cli_audit(&trajectory, &Scenario::load(&scenario.scenario)?, out.as_deref())
        }
        Command::ValidateModel { scenario } => harness::cli_validate_model(&Scenario::load(&scenario.scenario)?),
        Command::MeshInfo { scenario } => harness::cli_mesh_info(&Scenario::load(&scenario.scenario)?),
    }
}

fn main() -> ExitCode {
    let outcome = dispatch(Cli::parse()).unwrap_or_else(|e| Outcome::from_error(&e));
    for line in &outcome.lines {
        if outcome.code == 2 {
            eprintln!("{line}");
        } else {
            println!("{line}");
        }
    }
    ExitCode::from(outcome.code as u8)
}
