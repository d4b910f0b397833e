use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tradeflow_cli::{read_config, run, Command, Format, Overrides};

#[derive(Debug, Parser)]
#[command(name = "tradeflow", version, about = "Agent aggregation, field dynamics and price/return decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Admit non-oscillatory coupling parameters.
    #[arg(long, global = true)]
    allow_unstable: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!(
            "{}",
            tradeflow_cli::CliError::config("parse_config", vec!["--config <path> is required".into()]).to_json()
        );
        return ExitCode::from(2);
    };
    let overrides = Overrides {
        out: cli.out,
        format: cli.format,
        seed: cli.seed,
        allow_unstable: cli.allow_unstable,
    };
    match read_config(&config).and_then(|loaded| run(cli.command, loaded, &overrides)) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
