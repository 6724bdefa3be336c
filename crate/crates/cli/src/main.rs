use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coldfuse::Scenario;
use coldfuse_cli::*;
use coldfuse_hub::{default_addr, ADDR_ENV};

#[derive(Parser)]
#[command(name = "coldfuse", version, about = "Collaborative descent fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task family described by the config.
    Generate {
        #[arg(long, short)]
        config: PathBuf,
        /// Output directory (defaults to the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and write JSON and CSV reports.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Drive fusion through a hub; without a value uses $COLDFUSE_HUB_ADDR.
        #[arg(long, num_args = 0..=1, value_name = "ADDR")]
        hub: Option<Option<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the reports in a directory.
    Report {
        dir: PathBuf,
        /// Where to write the tidy summary CSV (defaults to DIR/summary.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve a fusion hub.
    HubServe {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Contribute one task's finetunes to a hub.
    Contribute {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        contributor: Option<String>,
        #[arg(long, env = ADDR_ENV)]
        hub: Option<String>,
        #[arg(long, default_value = coldfuse_hub::DEFAULT_RUN)]
        run_key: String,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let g = cmd_generate(&cfg, out.as_deref())?;
            println!("{}  {}", g.manifest_hash, g.dir.display());
        }
        Command::Run {
            config,
            scenario,
            seed_offset,
            hub,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let scenario = scenario.map(|s| s.parse::<Scenario>()).transpose()?;
            let opts = RunOptions {
                scenario,
                seed_offset,
                hub: hub.map(|h| h.unwrap_or_else(default_addr)),
                data_dir: data,
                out,
            };
            let r = cmd_run(&cfg, &opts)?;
            println!("{}", r.json_path.display());
            println!("{}", r.csv_path.display());
        }
        Command::Report { dir, csv } => {
            let r = cmd_report(&dir, csv.as_deref())?;
            print!("{}", r.table);
            println!("summary: {}", r.summary_path.display());
        }
        Command::HubServe { config, bind } => {
            let cfg = ExperimentConfig::load(&config)?;
            let hub = bind_hub(&cfg, bind.as_deref())?;
            println!("listening on {}", hub.local_addr());
            hub.serve()?;
        }
        Command::Contribute {
            config,
            task,
            contributor,
            hub,
            run_key,
            iterations,
            seed,
            data,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = ContributeOptions {
                task,
                contributor,
                hub: hub.unwrap_or_else(default_addr),
                run_key,
                iterations,
                seed,
                data_dir: data,
            };
            for h in cmd_contribute(&cfg, &opts)? {
                println!("{h}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
