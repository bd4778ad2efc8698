use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lablink::labsim::{self, RunOptions, Scenario, Target};

#[derive(Parser)]
#[command(name = "labsim", version, about = "Deterministic sensor-fleet simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario, feed it to a target, sweep and score.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// `inproc` or the base URL of a running service.
        #[arg(long, default_value = "inproc")]
        target: String,
        /// Bearer token for an HTTP target.
        #[arg(long, env = "LABLINK_TOKEN")]
        token: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pace ingestion against the wall clock.
        #[arg(long)]
        realtime: bool,
        /// Simulated seconds per wall second when pacing.
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
    },
    /// Print the SHA-256 of the generated point stream.
    Digest {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> lablink::Result<()> {
    match cli.command {
        Command::Run { scenario, target, token, out, realtime, speedup } => {
            let scenario = Scenario::load(&scenario)?;
            let mut target: Target = target.parse()?;
            if let Target::Http { token: t, .. } = &mut target {
                *t = token;
            }
            let opts = RunOptions { speedup: realtime.then_some(speedup) };
            let report = labsim::run(&scenario, &target, &opts)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
            for (class, s) in &report.per_class {
                eprintln!("{class:<18} tp={} fp={} fn={}", s.tp, s.fp, s.fn_);
            }
            eprintln!("recall {:.3}, false-positive devices {}", report.recall(), report.false_positive_devices.len());
            Ok(())
        }
        Command::Digest { scenario } => {
            let fleet = labsim::generate(&Scenario::load(&scenario)?)?;
            println!("{}", fleet.stream_digest());
            Ok(())
        }
    }
}
