mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{check_stage, parse_kv};

#[derive(Debug, Parser)]
#[command(name = "emflow", version, about = "Serial-section EM reconstruction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// Job database file
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Dataset name from the config, or a dataset directory
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// More logging (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// `--param key=value` overrides for a stage.
#[derive(Debug, Args, Default)]
pub struct ParamArgs {
    /// Stage parameter override, JSON value or bare string (repeatable)
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub params: Vec<(String, Value)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a synthetic dataset of tubes imaged as overlapping tiles
    Synth(SynthArgs),
    /// Stitch the tiles of one or all sections
    Montage {
        #[arg(long, conflicts_with = "all")]
        section: Option<u32>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        min_octave: Option<u32>,
        #[arg(long)]
        max_octave: Option<u32>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Match adjacent sections and relax the stack; all pairs plus
    /// relaxation unless a single pair or only relaxation is requested
    Align {
        #[arg(long, conflicts_with = "relax_only")]
        pair: Option<u32>,
        #[arg(long)]
        relax_only: bool,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Watershed mask from the dataset's cell-body and vessel seeds
    Mask(ParamArgs),
    /// Flood-fill one or all subvolumes
    Segment {
        /// Subvolume name i-j-k
        #[arg(long)]
        subvolume: Option<String>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Merge subvolume labels into the global segmentation
    Reconcile(ParamArgs),
    /// Export one OBJ mesh per object
    Mesh,
    /// Export one TEASAR skeleton per object
    Skeletonize(ParamArgs),
    /// Convert a PNG stack to a chunked volume or back
    Convert(ConvertArgs),
    /// Render a downsampled PNG of one section of a stage output
    Preview(PreviewArgs),
    /// Job database
    #[command(subcommand)]
    Db(DbCommand),
    /// Elastic worker pool
    #[command(subcommand)]
    Launcher(LauncherCommand),
    /// Pipeline assembly
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Montage parameter sweeps
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Online ingestion of arriving sections
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to create
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub sections: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write dataset.json only; sections arrive later (see `ingest sim`)
    #[arg(long)]
    pub empty: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// PNG directory or chunked volume
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Voxel size x,y,z in nm for PNG stack input
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [4.0, 4.0, 40.0])]
    pub voxel_size: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// montage, aligned, mask or seg
    #[arg(long)]
    pub stage: String,
    #[arg(long)]
    pub section: u32,
    #[arg(long, default_value_t = 1)]
    pub scale: u32,
    /// Read this chunked volume instead of the dataset's stage output
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DbCommand {
    Submit {
        #[arg(long)]
        app: String,
        #[arg(long = "arg", value_name = "KEY=VALUE", value_parser = parse_kv)]
        args: Vec<(String, Value)>,
        #[arg(long = "dep")]
        deps: Vec<String>,
        #[arg(long = "tag", value_name = "KEY=VALUE", value_parser = parse_kv)]
        tags: Vec<(String, Value)>,
        #[arg(long, default_value_t = 3)]
        max_attempts: u32,
    },
    Ls {
        #[arg(long)]
        state: Option<emflow_workflow::JobState>,
        /// key=value
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        app: Option<String>,
    },
    Show {
        id: String,
    },
    Rerun {
        id: String,
        /// Argument override (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
        overrides: Vec<(String, Value)>,
        /// Repeating a token returns the first rerun instead of a new one
        #[arg(long)]
        token: Option<String>,
    },
    Kill {
        id: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum LauncherCommand {
    Run {
        /// Workers kept alive when idle [default: 1]
        #[arg(long)]
        min_workers: Option<usize>,
        /// Upper bound on the pool [default: 4]
        #[arg(long)]
        max_workers: Option<usize>,
        /// Grow while READY jobs exceed this many per worker [default: 2]
        #[arg(long)]
        scale_up_backlog: Option<f64>,
        /// Retire a worker after this long without a job [default: 10]
        #[arg(long)]
        scale_down_idle_s: Option<f64>,
        /// Stop claiming after this many seconds
        #[arg(long, default_value_t = 3600.0)]
        wall_limit_s: f64,
        /// Exit after nothing is READY or RUNNING for this many seconds
        #[arg(long)]
        exit_when_idle_s: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Submit the full job DAG for the dataset
    Define {
        /// Skip a stage and everything downstream of it (repeatable)
        #[arg(long, value_parser = |s: &str| check_stage(s).map(|_| s.to_string()))]
        disable: Vec<String>,
        #[arg(long)]
        max_attempts: Option<u32>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SweepCommand {
    Run {
        /// Sweep spec (TOML or JSON); defaults to three octave windows over a
        /// synthetic tiered corpus
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also store the report in the job database
        #[arg(long)]
        save: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum IngestCommand {
    /// Timer-driven arrivals; with a synthetic dataset the tiles are written
    /// at arrival
    Sim {
        #[arg(long, default_value_t = 20.0)]
        cadence_s: f64,
        #[arg(long)]
        sections: u32,
        #[command(flatten)]
        job: IngestJobArgs,
    },
    /// Poll the dataset's raw directory for new sections
    Watch {
        #[arg(long, default_value_t = 1.0)]
        poll_s: f64,
        /// Stop after this many sections
        #[arg(long)]
        sections: Option<usize>,
        #[arg(long, default_value_t = 3600.0)]
        timeout_s: f64,
        #[command(flatten)]
        job: IngestJobArgs,
    },
}

#[derive(Debug, Args)]
pub struct IngestJobArgs {
    /// App submitted per section
    #[arg(long, default_value = "montage")]
    pub app: String,
    #[arg(long = "arg", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub args: Vec<(String, Value)>,
}

/// Errors caused by how the command was invoked rather than by the work.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
