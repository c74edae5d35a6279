//! `volrep`: the pipeline as a command suite over a run directory.
//!
//! Every command loads the run configuration (TOML file plus `--set`
//! overrides), does its one stage, prints a JSON summary on stdout and
//! writes the resolved configuration to `logs/<command>.toml` so the run
//! can be replayed.

pub mod commands;
pub mod config;
pub mod error;
pub mod history;
pub mod plot;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;
use volrep_core::dataset::Task;
use volrep_core::Execution;

use crate::config::{parse_representation, RunConfig};
use crate::error::{Error, Result};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "volrep", version, about = "Synthetic CT report-generation pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train_encoder.batch_size=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory (same as `--set paths.root=...`).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom corpus (only missing phantoms are created).
    PhantomGen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assign abnormalities to phantoms and write the dataset manifest.
    Inject {
        #[arg(long)]
        task: Option<String>,
        /// Also write every injected volume to disk.
        #[arg(long)]
        materialize: bool,
    },
    /// Render the template report of every sample.
    ReportsGen {
        #[arg(long)]
        task: Option<String>,
    },
    /// Run the rule-based labeler over reports.
    MineLabels {
        #[arg(long)]
        task: Option<String>,
        /// JSON-lines file of {id, text}; defaults to the task's reports.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Label and score the bundled hand-labelled corpus instead.
        #[arg(long, conflicts_with = "input")]
        bundled: bool,
    },
    TrainEncoder {
        #[arg(long)]
        task: Option<String>,
    },
    TrainDecoder {
        #[arg(long)]
        task: Option<String>,
        /// tokens | feature-map
        #[arg(long)]
        representation: Option<String>,
    },
    EvalEncoder {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    EvalDecoder {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        representation: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Greedy report generation for one split.
    Generate {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        representation: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render a metrics-history or PR-curve CSV to PNG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Metric drawn from a history file.
        #[arg(long, default_value = "loss")]
        metric: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PhantomGen { .. } => "phantom-gen",
            Command::Inject { .. } => "inject",
            Command::ReportsGen { .. } => "reports-gen",
            Command::MineLabels { .. } => "mine-labels",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::TrainDecoder { .. } => "train-decoder",
            Command::EvalEncoder { .. } => "eval-encoder",
            Command::EvalDecoder { .. } => "eval-decoder",
            Command::Generate { .. } => "generate",
            Command::Plot { .. } => "plot",
        }
    }

    /// Command-line flags that shadow config keys, as overrides applied
    /// after any `--set`.
    fn implied_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let task = |t: &Option<String>, o: &mut Vec<String>| {
            if let Some(t) = t {
                o.push(format!("dataset.task=\"{t}\""));
            }
        };
        let repr = |r: &Option<String>, o: &mut Vec<String>| {
            if let Some(r) = r {
                o.push(format!("decoder.memory=\"{}\"", r.replace('-', "_")));
            }
        };
        match self {
            Command::PhantomGen { n, seed } => {
                if let Some(n) = n {
                    o.push(format!("dataset.n_phantoms={n}"));
                }
                if let Some(s) = seed {
                    o.push(format!("dataset.seed={s}"));
                }
            }
            Command::Inject { task: t, .. }
            | Command::ReportsGen { task: t }
            | Command::MineLabels { task: t, .. }
            | Command::TrainEncoder { task: t }
            | Command::EvalEncoder { task: t, .. } => task(t, &mut o),
            Command::TrainDecoder { task: t, representation: r }
            | Command::EvalDecoder { task: t, representation: r, .. }
            | Command::Generate { task: t, representation: r, .. } => {
                task(t, &mut o);
                repr(r, &mut o);
            }
            Command::Plot { .. } => {}
        }
        o
    }
}

fn validate_flags(cmd: &Command) -> Result<()> {
    let check_task = |t: &Option<String>| t.as_deref().map_or(Ok(()), |t| Task::parse(t).map(|_| ()).map_err(Error::from));
    let check_repr = |r: &Option<String>| r.as_deref().map_or(Ok(()), |r| parse_representation(r).map(|_| ()));
    match cmd {
        Command::Inject { task, .. }
        | Command::ReportsGen { task }
        | Command::MineLabels { task, .. }
        | Command::TrainEncoder { task }
        | Command::EvalEncoder { task, .. } => check_task(task),
        Command::TrainDecoder { task, representation }
        | Command::EvalDecoder { task, representation, .. }
        | Command::Generate { task, representation, .. } => {
            check_task(task)?;
            check_repr(representation)
        }
        _ => Ok(()),
    }
}

/// Runs a parsed command line and returns its JSON summary.
pub fn run(cli: Cli) -> Result<Value> {
    if let Command::Plot { input, output, metric } = &cli.command {
        return commands::plot(input, output.as_deref(), metric);
    }
    validate_flags(&cli.command)?;
    let mut overrides = cli.overrides.clone();
    if let Some(root) = &cli.root {
        overrides.push(format!("paths.root={}", toml::Value::String(root.display().to_string())));
    }
    overrides.extend(cli.command.implied_overrides());
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let ws = Workspace::new(config, exec);
    let log_path = ws.path(format!("logs/{}.toml", cli.command.name()));
    volrep_core::io::atomic_write(&log_path, ws.config.to_toml().as_bytes())?;

    let task = ws.config.dataset.task;
    let kind = ws.config.decoder.memory;
    match &cli.command {
        Command::PhantomGen { .. } => commands::phantom_gen(&ws),
        Command::Inject { materialize, .. } => commands::inject(&ws, task, *materialize),
        Command::ReportsGen { .. } => commands::reports_gen(&ws, task),
        Command::MineLabels { input, bundled, .. } => commands::mine_labels(&ws, task, input.as_deref(), *bundled),
        Command::TrainEncoder { .. } => commands::train_encoder(&ws, task),
        Command::TrainDecoder { .. } => commands::train_decoder(&ws, task, kind),
        Command::EvalEncoder { split, .. } => commands::eval_encoder(&ws, task, commands::parse_split(split)?),
        Command::EvalDecoder { split, .. } => {
            commands::eval_decoder(&ws, task, kind, commands::parse_split(split)?)
        }
        Command::Generate { split, .. } => commands::generate(&ws, task, kind, commands::parse_split(split)?),
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code,
/// printing the summary (stdout) or a one-line JSON error (stderr).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = Error::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.json_line());
            return err.exit_code();
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.exit_code()
        }
    }
}
