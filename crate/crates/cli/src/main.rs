use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tagalign_cli::commands;
use tagalign_cli::config::{ConfigError, RunConfig};
use tagalign_cli::exit_code_for;

/// Weakly-supervised multimodal pretraining on synthetic worlds: a shared
/// Transformer trained by mask-and-predict on unpaired text and image
/// batches, with detector tags as cross-modal anchors.
#[derive(Parser)]
#[command(name = "tagalign", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set pretrain.epochs=40 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set out_dir=...
    #[arg(long)]
    out_dir: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out_dir {
            overrides.push(format!("out_dir=\"{out}\""));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and corpora.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overwrite existing corpus files.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain under the configured regime (w, s, h, or base).
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fine-tune retrieval or referring from a checkpoint.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Representation-space alignment probe.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export last-layer representations for external tools.
    ExportEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Comparison table across completed run directories.
    Report {
        /// Run directories to include.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Emit machine-readable JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn run_with_config(
    args: &ConfigArgs,
    f: impl FnOnce(&RunConfig) -> tagalign_core::Result<()>,
) -> ExitCode {
    let config = match args.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match f(&config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, force } => {
            run_with_config(&config, |c| commands::cmd_generate(c, force))
        }
        Command::Pretrain { config } => run_with_config(&config, commands::cmd_pretrain),
        Command::Finetune { config } => run_with_config(&config, commands::cmd_finetune),
        Command::Eval { config } => run_with_config(&config, commands::cmd_eval),
        Command::Probe { config } => run_with_config(&config, commands::cmd_probe),
        Command::ExportEmbeddings { config } => {
            run_with_config(&config, commands::cmd_export_embeddings)
        }
        Command::Report { run_dirs, json } => match commands::cmd_report(&run_dirs, json) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code_for(&e) as u8)
            }
        },
    }
}
