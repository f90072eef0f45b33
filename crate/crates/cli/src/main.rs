use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use windstate_cli::error::{CliError, EXIT_CONFIG, EXIT_IO};
use windstate_cli::pipeline::{self, Command};
use windstate_cli::{validate_config_with, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "windstate", version, about = "Farm-state risk-return analysis")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed override for the synthetic scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Neither read nor write cached covariance/spectral results.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write the synthetic scenario as velocity.csv and power.csv.
    Generate,
    /// Run the full pipeline.
    Analyze,
    /// Run through the spectral stage only.
    Spectrum,
    /// Recompute policy.csv from an existing risk_return.csv.
    Policy,
    /// Check structure and spectral invariants; writes nothing.
    Verify,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let Some(path) = &cli.config else {
        return Err(CliError::Config(vec!["--config is required".to_string()]));
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        no_cache: cli.no_cache,
    };
    let cfg = validate_config_with(path, &overrides)?;
    info!("resolved configuration:\n{}", cfg.to_toml(true));
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Generate => {
            let cfg = load_config(cli)?;
            for d in pipeline::generate_data(&cfg, &cfg.output.dir)? {
                println!("{}  {}", d.sha256, cfg.output.dir.join(&d.name).display());
            }
        }
        Cmd::Analyze | Cmd::Spectrum => {
            let cfg = load_config(cli)?;
            let command = match cli.command {
                Cmd::Analyze => Command::Analyze,
                _ => Command::Spectrum,
            };
            let outcome = pipeline::run_pipeline(&cfg, command)?;
            println!("manifest {}", outcome.manifest.manifest_sha256);
        }
        Cmd::Policy => {
            let dir = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load_config(cli)?.output.dir,
                (None, None) => {
                    return Err(CliError::Config(vec![
                        "policy needs --out or --config".to_string(),
                    ]))
                }
            };
            let policy = pipeline::policy_from_table(&dir)?;
            println!(
                "{} state bins covered, {} excluded",
                policy.covered().count(),
                policy.excluded_bins().len()
            );
        }
        Cmd::Verify => {
            let cfg = load_config(cli)?;
            let report = pipeline::verify(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            if !report.failures.is_empty() {
                return Err(CliError::Check(report.failures.join("; ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let result = match cli.threads {
        Some(0) => Err(CliError::Config(vec!["--threads must be at least 1".to_string()])),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => {
                error!("cannot start thread pool: {e}");
                return ExitCode::from(EXIT_IO as u8);
            }
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let code = e.exit_code();
            debug_assert!(code >= EXIT_CONFIG);
            ExitCode::from(code as u8)
        }
    }
}
