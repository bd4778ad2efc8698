use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lablink::ServiceConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "lablink", version, about = "Living-lab sensing platform service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service until interrupted.
    Serve {
        /// TOML configuration file. Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `listen_address` from the configuration.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Validate a configuration file and print the effective settings.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: Option<&PathBuf>) -> lablink::Result<ServiceConfig> {
    match path {
        Some(p) => ServiceConfig::load(p),
        None => ServiceConfig::from_toml_with_env("", std::env::vars()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("LABLINK_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, listen } => serve(config, listen),
        Command::CheckConfig { config } => load(Some(&config)).map(|c| {
            println!("{}", toml::to_string_pretty(&c).unwrap_or_default());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}

fn serve(config: Option<PathBuf>, listen: Option<String>) -> lablink::Result<()> {
    let mut cfg = load(config.as_ref())?;
    if let Some(l) = listen {
        cfg.listen_address = l;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let handle = lablink::api::serve(cfg).await?;
        tracing::info!(addr = %handle.addr, "listening");
        handle
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await
    })
}
