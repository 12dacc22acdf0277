use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resobj::commands::{self, SWEEP_NMS_THRESHOLDS, SWEEP_SCORE_THRESHOLDS};
use resobj::error::{exit, Error};
use resobj::experiments::Axis;
use resobj_core::fidelity::LossKind;

#[derive(Parser)]
#[command(name = "resobj", version, about = "Residual objectness detector: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump validation scenes to one file each.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, metrics and config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP of a checkpoint on the validation scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "score-thresh")]
        score_thresh: Option<f64>,
        #[arg(long)]
        nms: Option<f64>,
        /// Write detections as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP over a grid of score and NMS thresholds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated score thresholds.
        #[arg(long)]
        thresholds: Option<String>,
        /// Comma-separated NMS IoU thresholds.
        #[arg(long)]
        nms: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed ablation along one axis.
    Ablate {
        /// gradient-flow, residual-source or steps.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated axis values; defaults to every value.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the losses.
    Gradcheck {
        /// ce, focal, obj, resobj or box; all when omitted.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn run(cmd: Command) -> Result<String, Error> {
    match cmd {
        Command::GenData { config, count, out } => commands::gen_data(&config, count, &out),
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval {
            checkpoint,
            config,
            score_thresh,
            nms,
            out,
        } => commands::eval(&checkpoint, &config, score_thresh, nms, out.as_deref()),
        Command::Sweep {
            checkpoint,
            config,
            thresholds,
            nms,
            out,
        } => {
            let scores = match thresholds {
                Some(s) => commands::parse_list(&s)?,
                None => SWEEP_SCORE_THRESHOLDS.to_vec(),
            };
            let nms = match nms {
                Some(s) => commands::parse_list(&s)?,
                None => SWEEP_NMS_THRESHOLDS.to_vec(),
            };
            commands::sweep(&checkpoint, &config, &scores, &nms, out.as_deref())
        }
        Command::Ablate {
            axis,
            config,
            seeds,
            values,
            out,
        } => {
            let axis = Axis::parse(&axis).ok_or_else(|| Error::Usage(format!("unknown axis `{axis}`")))?;
            let variants = values.map(|v| commands::parse_variants(axis, &v)).transpose()?;
            commands::ablate(axis, &config, seeds, variants.as_deref(), out.as_deref())
        }
        Command::Gradcheck { loss, instances } => {
            let kind = loss
                .map(|l| LossKind::parse(&l).ok_or_else(|| Error::Usage(format!("unknown loss `{l}`"))))
                .transpose()?;
            commands::gradcheck(kind, instances)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
