//! `gada`: generate synthetic detection data, build graphs, train, evaluate,
//! and run the sweep, ablation, robustness and gradient-check studies.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration or usage error,
//! 3 I/O or parse error, 4 shape or compatibility error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gada::Error;

#[derive(Debug, Parser)]
#[command(name = "gada", version, about = "Spatiotemporal detection graphs and graph-attention video classification")]
struct Cli {
    /// Run configuration (JSON). Missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test detection datasets.
    Generate {
        /// Output directory for train.jsonl, val.jsonl and test.jsonl.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Build graphs for one dataset file and write them as JSON lines.
    Graph {
        /// Dataset file (JSON lines).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Train a model and write its checkpoint and history log.
    Train {
        #[command(flatten)]
        data: DataFlags,
        /// Checkpoint path.
        #[arg(long, value_name = "FILE")]
        out_checkpoint: Option<PathBuf>,
        /// History log (JSON lines); defaults next to the checkpoint.
        #[arg(long, value_name = "FILE")]
        history: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Evaluate a checkpoint: threshold on validation, metrics on test,
    /// comparison with the frame-average baseline.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        /// Structured copy of the report.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Finite-difference gradient check on seeded random graphs.
    Gradcheck {
        /// Number of random graphs.
        #[arg(long, default_value_t = 10)]
        graphs: usize,
        /// Coordinates checked per graph.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Test AUC across frame windows (epsilon) or IoU thresholds (delta).
    Sweep {
        /// `epsilon` or `delta`.
        #[arg(long)]
        axis: gada::eval::SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        /// Evaluate these weights on every value instead of retraining.
        #[arg(long, value_name = "FILE")]
        frozen: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        table: TableFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Retrain with node or edge features removed.
    Ablate {
        /// Feature sets separated by commas, e.g. `size+confidence+edges,size+edges`.
        /// Defaults to the eight-row table.
        #[arg(long, value_delimiter = ',')]
        masks: Vec<gada::eval::AblationMask>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        table: TableFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// AUC of frozen weights under increasing detector noise.
    Robustness {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Levels as `conf:jitter:drop[:spurious]`, comma-separated. Defaults to
        /// the configured levels.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<commands::Level>,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        table: TableFlags,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Export nodes, scores, node weights and attention of one video.
    Viz {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset file containing the video.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long)]
        video_id: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
    },
}

#[derive(Debug, Args)]
struct DataFlags {
    /// Directory with train.jsonl, val.jsonl and test.jsonl. Without it the
    /// splits are generated from the configuration.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TableFlags {
    /// Output table (TSV); a JSON copy is written alongside.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct GraphFlags {
    /// Maximum frame gap of an edge (epsilon).
    #[arg(long)]
    frame_window: Option<u32>,
    /// Minimum IoU of an edge, exclusive (delta).
    #[arg(long)]
    iou_threshold: Option<f64>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Invariant(_) => 1,
        Error::Config(_) | Error::SingleClass { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::MalformedRecord { .. } => 3,
        Error::Shape(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_kind_has_its_exit_code() {
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("gone"),
        };
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&Error::Parse { line: 1, message: String::new() }), 3);
        assert_eq!(exit_code(&Error::Invariant(String::new())), 1);
        assert_eq!(exit_code(&Error::Config(String::new())), 2);
        assert_eq!(exit_code(&Error::SingleClass { positives: 0, negatives: 3 }), 2);
        assert_eq!(exit_code(&Error::Shape(String::new())), 4);
    }

    #[test]
    fn command_line_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
