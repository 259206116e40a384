//! `locus`: unsupervised landmark discovery by conditional image generation.
//!
//! Subcommands: `synth-data` (procedural sprite dataset), `train`
//! (detector + generator), `eval` (probe / pck / assign / sweep /
//! stability), `swap` (style-geometry transfer grids).

mod commands;

use clap::{Parser, Subcommand, ValueEnum};
use locus_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "locus",
    about = "Self-supervised object landmark discovery through a keypoint bottleneck",
    version
)]
struct Cli {
    /// Emit machine-readable error JSON on stderr.
    #[arg(long, global = true)]
    json: bool,

    /// JSON config file; missing fields fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set train.lr=0.001
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    Probe,
    Pck,
    Assign,
    Sweep,
    Stability,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a ground-truthed sprite dataset directory.
    SynthData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector and generator; writes checkpoints and metrics.
    Train {
        /// Run directory (config.json, metrics.csv, checkpoints/, figures/).
        #[arg(long)]
        out: PathBuf,
        /// Image/sequence folder to train on instead of procedural sprites.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with one of the protocols; writes reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset folder (defaults to the procedural sprite test split).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Output directory for reports and overlays.
        #[arg(long)]
        out: PathBuf,
        /// Sweep sizes, e.g. --ns 1,5,10,100
        #[arg(long)]
        ns: Option<String>,
        /// PCK pixel threshold override.
        #[arg(long)]
        d: Option<f64>,
    },
    /// Render style/geometry swap grids (and optional quadruplet strips).
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Folder of style (appearance) images.
        #[arg(long)]
        style: PathBuf,
        /// Folder of geometry (pose) images.
        #[arg(long)]
        geom: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also emit a source/target/reconstruction/keypoints strip.
        #[arg(long)]
        strip: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let json_errors = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            if json_errors {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.to_string(), "kind": kind, "exit_code": code })
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

/// Exit codes: 0 success, 1 user error, 2 internal error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::Format(_) | Error::Io(_) => {
            (1, "user")
        }
        Error::Json(_) => (1, "user"),
        Error::Image(_) => (1, "user"),
        Error::Numeric(_) => (2, "internal"),
    }
}

fn run(cli: Cli) -> locus_core::Result<()> {
    let cfg = locus_core::config::RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    match cli.cmd {
        Cmd::SynthData { out } => commands::synth_data(&cfg, &out),
        Cmd::Train { out, data, resume } => commands::train(&cfg, &out, data.as_deref(), resume),
        Cmd::Eval {
            ckpt,
            data,
            protocol,
            out,
            ns,
            d,
        } => {
            let protocol = match protocol {
                Protocol::Probe => commands::EvalProtocol::Probe,
                Protocol::Pck => commands::EvalProtocol::Pck,
                Protocol::Assign => commands::EvalProtocol::Assign,
                Protocol::Sweep => commands::EvalProtocol::Sweep,
                Protocol::Stability => commands::EvalProtocol::Stability,
            };
            commands::eval(&cfg, &ckpt, data.as_deref(), protocol, &out, ns.as_deref(), d)
        }
        Cmd::Swap {
            ckpt,
            style,
            geom,
            out,
            strip,
        } => commands::swap(&ckpt, &style, &geom, &out, strip),
    }
}
