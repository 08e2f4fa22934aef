use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nir_cli::{cmd_analyze, cmd_audit, cmd_compare, cmd_generate, cmd_train, CliError, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "nir",
    version,
    about = "Incidence-variance regularized training and auditing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model and write checkpoint, log and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Per-group TPR/FPR disparity of a trained model on the test split.
    Audit {
        /// Defaults to the run directory's resolved config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Attribute to audit; repeatable.
        #[arg(long = "attr")]
        attributes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Top-k neuron activations across subgroup cells.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reference cell, e.g. `label=+,group=A`.
        #[arg(long)]
        cell: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Baseline and regularized runs on identical data and seeds.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate {
            config,
            out,
            seed,
            overwrite,
        } => {
            let ds = cmd_generate(
                config.as_deref(),
                &out,
                &Overrides { seed, lambda: None },
                overwrite,
            )?;
            println!(
                "wrote {} samples ({} positive) to {}",
                ds.size(),
                ds.count_positive(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            lambda,
            overwrite,
        } => {
            let r = cmd_train(
                config.as_deref(),
                data.as_deref(),
                &out,
                &Overrides { seed, lambda },
                overwrite,
            )?;
            println!(
                "best epoch {} / {} (val AUC {:.4}); run written to {}",
                r.log.best_epoch,
                r.log.records.len(),
                r.log.best_val_auc,
                out.display()
            );
        }
        Command::Audit {
            config,
            checkpoint,
            data,
            attributes,
            out,
            overwrite,
        } => {
            let reports = cmd_audit(
                config.as_deref(),
                checkpoint.as_deref(),
                data.as_deref(),
                &attributes,
                &out,
                overwrite,
            )?;
            for r in reports {
                println!("{}", r.to_table());
            }
        }
        Command::Analyze {
            config,
            checkpoint,
            data,
            cell,
            k,
            out,
            overwrite,
        } => {
            let export = cmd_analyze(
                config.as_deref(),
                checkpoint.as_deref(),
                data.as_deref(),
                cell.as_deref(),
                k,
                &out,
                overwrite,
            )?;
            print!("{}", export.matrix.to_table());
            println!("entanglement score: {:.6}", export.entanglement_score);
        }
        Command::Compare {
            config,
            data,
            out,
            seed,
            lambda,
            overwrite,
        } => {
            let summary = cmd_compare(
                config.as_deref(),
                data.as_deref(),
                &out,
                &Overrides { seed, lambda },
                overwrite,
            )?;
            print!("{}", summary.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NIR_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
