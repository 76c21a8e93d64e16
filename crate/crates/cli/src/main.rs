//! `tsfl` — drive the token-compressed split-training simulator from one
//! flat config file.
//!
//! Every subcommand prints one JSON line to stdout on success. Failures
//! print `error: <message>` on stderr as a single line and exit 2 for
//! usage/config problems or 1 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "tsfl",
    version,
    about = "Token-compressed split federated fine-tuning: train, analyze, search, codec"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated simulation; write per-round JSONL and a summary CSV.
    Train {
        /// Flat key = value experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.jsonl and summary.csv.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also save the trained model checkpoint here.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Emit the Dirichlet client shards for the configured experiment.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the distortion factor and convergence-penalty constants.
    Analyze {
        /// Experiment config (omit when using --q/--d).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measure constants from this checkpoint instead of a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Bare formula mode: bit width (with --d, no config).
        #[arg(long)]
        q: Option<u32>,
        /// Bare formula mode: entry count (with --q, no config).
        #[arg(long)]
        d: Option<usize>,
    },
    /// Grid-search (cut, kept, width) under payload and memory budgets.
    Search {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inspect, decode or re-encode wire messages (.tsfa files).
    Codec {
        #[command(subcommand)]
        cmd: CodecCommand,
    },
    /// Regenerate the canonical golden wire vectors.
    Goldens {
        /// Directory holding the golden files.
        #[arg(long)]
        out_dir: PathBuf,
        /// Actually write; without this flag, compare and report only.
        #[arg(long)]
        write: bool,
    },
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Print a one-line summary of a message file.
    Inspect { file: PathBuf },
    /// Decode a message file to JSON (stdout or --out).
    Decode {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include the deterministically dequantized activation values.
        #[arg(long)]
        values: bool,
    },
    /// Encode a JSON packet description back to message bytes.
    Encode {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train {
            config,
            out_dir,
            save_model,
        } => commands::train(&config, &out_dir, save_model.as_deref()),
        Command::Partition { config, out } => commands::partition(&config, out.as_deref()),
        Command::Analyze {
            config,
            model,
            q,
            d,
        } => commands::analyze(config.as_deref(), model.as_deref(), q, d),
        Command::Search { config } => commands::search(&config),
        Command::Codec { cmd } => match cmd {
            CodecCommand::Inspect { file } => commands::codec_inspect(&file),
            CodecCommand::Decode { file, out, values } => {
                commands::codec_decode(&file, out.as_deref(), values)
            }
            CodecCommand::Encode { file, out } => commands::codec_encode(&file, &out),
        },
        Command::Goldens { out_dir, write } => commands::goldens(&out_dir, write),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
