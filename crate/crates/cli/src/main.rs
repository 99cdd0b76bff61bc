use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fraccount_cli::commands::{self, RunArgs};
use fraccount_cli::{acceptance, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "fraccount", version, about = "Fractional counting experiments on synthetic registers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds and registers for every epoch.
    Simulate(Common),
    /// Fit the initial counters and benchmark them.
    Initiate(Common),
    /// Roll the counters through every epoch.
    Roll(Common),
    /// Locality counts by every method.
    Count(Common),
    /// Audit-sample estimates, MSE-hat and tests.
    Audit(Common),
    /// Summarise counts and audits over replicates.
    Report(Common),
    /// Compare the counts of two or more runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Acceptance,
}

#[derive(Args)]
struct Common {
    /// TOML run config; may name a `preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    replicates: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn into_args(self) -> Result<RunArgs, CliError> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        RunArgs::new(cfg, self.seed, self.replicates, self.jobs, self.out)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&c.into_args()?),
        Command::Initiate(c) => commands::initiate(&c.into_args()?),
        Command::Roll(c) => commands::roll(&c.into_args()?),
        Command::Count(c) => commands::count(&c.into_args()?),
        Command::Audit(c) => commands::audit(&c.into_args()?),
        Command::Report(c) => commands::report(&c.into_args()?),
        Command::Compare { dirs, out } => match out {
            Some(p) => commands::compare(&dirs, std::fs::File::create(p)?),
            None => commands::compare(&dirs, std::io::stdout().lock()),
        },
        Command::Acceptance => {
            let results = acceptance::run_all(&mut std::io::stdout().lock())?;
            let failed = results.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} of {} criteria failed", results.len())));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
