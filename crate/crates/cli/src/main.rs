use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fenc::commands;
use fenc::config::ExperimentConfig;
use fenc::{output, CliError};

#[derive(Parser)]
#[command(name = "fenc", version, about = "Function encoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disables parallelism for bit-reproducible output.
    #[arg(long)]
    serial: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if self.serial {
            cfg.train.parallel = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train, and write the model plus exports.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Kernel Gram of a saved model over a probe CSV.
    ExportGram {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Correlation and spectra of two Gram CSVs, as JSON.
    CompareGram {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generalization bounds of a saved encoder on its config's tasks.
    Bounds {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the configured task collection as CSV.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn emit_json<T: serde::Serialize>(value: &T, output: Option<&PathBuf>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match output {
        Some(p) => output::write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { cfg, output } => {
            let cfg = cfg.load()?;
            let dir = output.unwrap_or_else(|| cfg.output_dir.clone());
            let m = commands::run(&cfg, &dir)?;
            println!(
                "{}: {} bases, query mse {:.3e}, {:.1}s",
                dir.display(),
                m.n_basis.map_or("-".to_string(), |n| n.to_string()),
                m.final_query_mse,
                m.wall_time_seconds
            );
            Ok(())
        }
        Command::ExportGram { model, probes, output } => commands::export_gram(&model, &probes, &output),
        Command::CompareGram { a, b, output } => emit_json(&commands::compare_grams(&a, &b)?, output.as_ref()),
        Command::Bounds { model, cfg, output } => {
            let cfg = cfg.load()?;
            emit_json(&commands::bounds(&model, &cfg)?, output.as_ref())
        }
        Command::GenData { cfg, output } => {
            let cfg = cfg.load()?;
            let path = commands::gen_data(&cfg, &output.unwrap_or_else(|| cfg.output_dir.clone()))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
