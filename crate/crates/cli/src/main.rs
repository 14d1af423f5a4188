// SPDX-License-Identifier: MIT OR Apache-2.0

//! `biasloc`: dataset generation, planted models, component discovery,
//! selective fine-tuning, evaluation and reports.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 when an input file is
//! missing, 4 when inputs fail validation, 1 for anything else.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use manifest::{manifest_path, RunManifest};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound { 3 } else { 1 };
        Self {
            code,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

impl From<biasloc::Error> for CliError {
    fn from(e: biasloc::Error) -> Self {
        let code = match &e {
            biasloc::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            biasloc::Error::Io { .. } => 1,
            _ => 4,
        };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "biasloc", version, about = "Locate and mitigate bias-carrying transformer components")]
pub struct Cli {
    /// Worker threads for parallel inner loops; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComponentSet {
    Heads,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Final,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Topk,
    Greedy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LengthArg {
    Auto,
    Total,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Linear,
    Constant,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand templates over professions into counterfactual pairs.
    Generate {
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        professions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a planted-bias model and its synthetic datasets.
    Plant {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        noise_scale: Option<f64>,
        #[arg(long, default_value_t = 64)]
        n_pairs: usize,
        #[arg(long, default_value_t = 320)]
        n_corpus: usize,
        #[arg(long, default_value_t = 200)]
        n_neutral: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a small language model on a text file, one sequence per line.
    TrainToy {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rank components by natural indirect effect.
    DiscoverCma {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum, default_value = "topk")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "heads")]
        components: ComponentSet,
        #[arg(long, value_enum, default_value = "final")]
        scope: ScopeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune the component graph by edge ablation.
    DiscoverAcdc {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        tau: f64,
        /// Edge records of the pruned graph.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Ranked file of heads kept in the circuit.
        #[arg(long)]
        heads_out: Option<PathBuf>,
    },
    /// Learn a sparse counterfactual mask over components.
    DiscoverDm {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        lr_lambda: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "heads")]
        components: ComponentSet,
        /// Emit the `n` highest-scoring components instead of those kept by
        /// the binarized mask.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Training trace as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fine-tune only the selected parameters on a labeled corpus.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// full | random | all-attn | last4 | last:<n> | file:<ranked file>
        #[arg(long)]
        select: String,
        /// Heads drawn by `--select random`.
        #[arg(long, default_value_t = 10)]
        n_random: usize,
        /// Ranked files whose components `--select random` avoids.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<PathBuf>,
        /// Use only the first `n` entries of a `file:` selection.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, value_enum, default_value = "linear")]
        schedule: ScheduleArg,
        #[arg(long, default_value_t = 0.9)]
        split: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a model on bias and language-modeling metrics.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        /// Prefix-plus-continuation pairs for the professions score.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Sentence pairs (more, less stereotypical) for the stereotype score.
        #[arg(long)]
        stereo_pairs: Option<PathBuf>,
        /// Sentence pairs (correct, incorrect) for minimal-pair accuracy.
        #[arg(long)]
        accuracy_pairs: Option<PathBuf>,
        /// Text corpus for perplexity.
        #[arg(long)]
        ppl_corpus: Option<PathBuf>,
        /// Subset of professions,stereotype,accuracy,perplexity; defaults to
        /// every metric whose data is given.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long, value_enum, default_value = "auto")]
        length_mode: LengthArg,
        #[arg(long, default_value = "model")]
        tag: String,
        /// Include per-example records.
        #[arg(long)]
        records: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare evaluation reports against a baseline.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
        /// Tab-separated table.
        #[arg(long)]
        out: PathBuf,
        /// Human-readable table.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Replay a command from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Plant { .. } => "plant",
            Command::TrainToy { .. } => "train-toy",
            Command::DiscoverCma { .. } => "discover-cma",
            Command::DiscoverAcdc { .. } => "discover-acdc",
            Command::DiscoverDm { .. } => "discover-dm",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Files a command read and wrote; the first output names the manifest.
#[derive(Debug, Default)]
pub struct RunFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn run(argv: Vec<String>) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("biasloc".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Err(CliError { code, msg: String::new() });
        }
    };
    if cli.jobs == 0 {
        return Err(CliError::invalid("--jobs must be at least 1"));
    }
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(manifest, &argv, cli.jobs);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError {
            code: 1,
            msg: e.to_string(),
        })?;
    let start = Instant::now();
    let files = pool.install(|| commands::execute(&cli))?;
    let Some(primary) = files.outputs.first() else {
        return Ok(());
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        argv,
        cwd: std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?,
        seed: cli.seed,
        jobs: cli.jobs,
        inputs: files.inputs.clone(),
        outputs: files.outputs.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&manifest_path(primary))
}

/// Replays the manifest's arguments from its working directory; a `--jobs`
/// given to `rerun` itself overrides the recorded one.
fn rerun(path: &Path, argv: &[String], jobs: usize) -> CliResult<()> {
    let m = RunManifest::read(path)?;
    let mut args = strip_jobs(&m.argv);
    let jobs = if argv.iter().any(|a| a == "--jobs" || a.starts_with("--jobs=")) {
        jobs
    } else {
        m.jobs
    };
    args.push("--jobs".into());
    args.push(jobs.to_string());
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::io(&m.cwd, e))?;
    run(args)
}

fn strip_jobs(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--jobs" {
            skip = true;
        } else if !a.starts_with("--jobs=") {
            out.push(a.clone());
        }
    }
    out
}

fn main() -> ExitCode {
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.msg.is_empty() {
                eprintln!("error: {}", e.msg);
            }
            ExitCode::from(e.code)
        }
    }
}
