//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use nisp_core::cbunet::Preset;
use nisp_core::imaging::PatchRect;

use crate::commands::{self, parse_rect, ConvertArgs, Pipeline, RenderArgs, TrainArgs};
use crate::error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "nisp", version, about = "Nighttime RAW rendering: classical baseline and two-stage network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: nisp_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a RAW mosaic to an 8-bit PNG.
    Render {
        #[arg(long)]
        input: PathBuf,
        /// Camera sidecar; defaults to `<input stem>.meta.json`.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "baseline")]
        pipeline: Pipeline,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Require the weights to have been trained with this preset (tiny|full).
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the sRGB-encoded 16-bit intermediate.
        #[arg(long)]
        output16: Option<PathBuf>,
    },
    /// Write the simple-ISP preview PNG used for annotation.
    Preview {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Print the white-patch illuminant of `x,y,w,h` (linear image).
        #[arg(long, value_parser = parse_rect)]
        rect: Option<PatchRect>,
    },
    /// Train both stages and fine-tune jointly.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON training config; defaults to the desk schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight file to write.
        #[arg(long)]
        output: PathBuf,
        /// Run log (JSON); defaults to `<output>.log.json`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-image and mean PSNR of cbunet renders, with params and FLOPs, as CSV.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Serve the annotation API (and UI assets) for a dataset.
    AnnotateServe {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory of built UI assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Import a PGM mosaic (and optional target PNG) into dataset layout.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample id; defaults to the input file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Generate annotated synthetic RAW/target pairs.
    Synth {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Architecture and loss ablations as CSV.
    Ablation {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Samples (sorted ids) used for training; the rest are scored.
        #[arg(long)]
        train_count: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match run(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Render { input, meta, pipeline, weights, preset, output, output16 } => {
            commands::render(&RenderArgs { input, meta, pipeline, weights, preset, output, output16 })
        }
        Command::Preview { input, meta, output, rect } => {
            if let Some(il) = commands::preview(&input, meta.as_deref(), &output, rect)? {
                let [r, g, b] = il.rgb();
                println!("{}", serde_json::json!({ "illuminant": [r, g, b] }));
            }
            Ok(())
        }
        Command::Train { dataset, config, seed, output, log } => {
            let args = TrainArgs { dataset, config, seed, output, log };
            commands::train(&args, &mut |s| eprintln!("{}", s.to_json()))
        }
        Command::Eval { dataset, weights, output } => {
            let csv = commands::eval(&dataset, &weights, &output)?;
            print!("{csv}");
            Ok(())
        }
        Command::AnnotateServe { dataset, port, static_dir } => {
            if !dataset.join("raw").is_dir() {
                return Err(CliError::new(exit::IO, format!("{}: no raw/ directory", dataset.display())));
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(exit::OTHER, e.to_string()))?;
            rt.block_on(crate::server::serve(dataset, port, static_dir))
                .map_err(|e| CliError::new(exit::IO, format!("port {port}: {e}")))
        }
        Command::Convert { input, meta, target, dataset, id } => {
            let id = commands::convert(&ConvertArgs { input, meta, target, dataset, id })?;
            println!("{id}");
            Ok(())
        }
        Command::Synth { dataset, count, size, seed } => {
            for id in commands::synth(&dataset, count, size, seed)? {
                println!("{id}");
            }
            Ok(())
        }
        Command::Ablation { dataset, config, seed, train_count, output } => {
            let csv = commands::ablation(&dataset, config.as_deref(), seed, train_count, &output)?;
            print!("{csv}");
            Ok(())
        }
    }
}
